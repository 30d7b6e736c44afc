//! Saved models: a single JSON document with every real number stored as a
//! full-precision decimal string.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conformal::{ConformalCalibration, ConformalClassifier, NonconformityMeasure};
use crate::data::Preprocessor;
use crate::error::{invalid, io_err, DwacError, Result};
use crate::heads::{Classifier, EmbeddedTrainingSet, GaussianKernel, HeadKind};
use crate::net::{EmbeddingModel, Layer, MlpSpec};

pub const FORMAT_VERSION: &str = "dwac-kit/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub head: HeadKind,
    pub kernel: GaussianKernel,
    pub num_classes: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
    /// Schema plus training-split normalization; absent for synthetic data.
    pub preprocessor: Option<Preprocessor>,
    pub reference: Option<EmbeddedTrainingSet>,
    #[serde(default)]
    pub calibrations: Vec<ConformalCalibration>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

impl ModelArtifact {
    pub fn from_classifier(classifier: &Classifier) -> Self {
        let model = classifier.model();
        Self {
            format: FORMAT_VERSION.to_string(),
            head: model.head(),
            kernel: model.kernel(),
            num_classes: classifier.num_classes(),
            class_names: Vec::new(),
            spec: model.spec().clone(),
            layers: model.layers().to_vec(),
            preprocessor: None,
            reference: classifier.reference().cloned(),
            calibrations: Vec::new(),
            provenance: serde_json::Value::Null,
        }
    }

    pub fn with_calibration(mut self, calibration: ConformalCalibration) -> Self {
        self.calibrations
            .retain(|c| c.measure() != calibration.measure());
        self.calibrations.push(calibration);
        self
    }

    pub fn calibration(&self, measure: NonconformityMeasure) -> Option<&ConformalCalibration> {
        self.calibrations.iter().find(|c| c.measure() == measure)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT_VERSION {
            return Err(DwacError::Format(format!(
                "unsupported model format `{}`, expected `{FORMAT_VERSION}`",
                self.format
            )));
        }
        GaussianKernel::new(self.kernel.sigma())?;
        self.spec.validate()?;
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(invalid(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        match (self.head, &self.reference) {
            (HeadKind::Dwac, None) => {
                return Err(DwacError::Format(
                    "a dwac model needs its embedded training set".into(),
                ))
            }
            (HeadKind::Dwac, Some(r)) => {
                EmbeddedTrainingSet::new(
                    r.embeddings().clone(),
                    r.labels().to_vec(),
                    r.num_classes(),
                    r.kernel(),
                )?;
                if r.num_classes() != self.num_classes || r.h_dim() != self.spec.output_dim() {
                    return Err(DwacError::Format(
                        "embedded training set does not match the model".into(),
                    ));
                }
                if r.kernel() != self.kernel {
                    return Err(DwacError::Format(
                        "embedded training set uses a different kernel".into(),
                    ));
                }
            }
            (HeadKind::Softmax, _) => {
                if self.spec.output_dim() != self.num_classes {
                    return Err(DwacError::Format(
                        "softmax output width differs from the class count".into(),
                    ));
                }
            }
        }
        if let Some(p) = &self.preprocessor {
            p.schema.validate()?;
            if p.width() != self.spec.input_dim() {
                return Err(DwacError::Format(
                    "preprocessor width differs from the network input".into(),
                ));
            }
        }
        for c in &self.calibrations {
            c.validate()?;
            if !c.measure().supports(self.head) {
                return Err(DwacError::Incompatible(format!(
                    "{} calibration on a {} model",
                    c.measure(),
                    self.head
                )));
            }
        }
        Ok(())
    }

    pub fn to_classifier(&self) -> Result<Classifier> {
        self.validate()?;
        let model = EmbeddingModel::from_parts(
            self.spec.clone(),
            self.layers.clone(),
            self.head,
            self.kernel,
        )?;
        match self.head {
            HeadKind::Softmax => Classifier::softmax(model),
            HeadKind::Dwac => Classifier::dwac(model, self.reference.clone().expect("validated")),
        }
    }

    pub fn to_conformal(&self, measure: NonconformityMeasure) -> Result<ConformalClassifier> {
        let calibration = self
            .calibration(measure)
            .ok_or_else(|| invalid(format!("model has no {measure} calibration")))?
            .clone();
        Ok(ConformalClassifier {
            classifier: self.to_classifier()?,
            calibration,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let artifact: Self = serde_json::from_str(text)?;
        artifact.validate()?;
        Ok(artifact)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// readers never observe a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| invalid(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::calibrate;
    use crate::data::make_blobs;
    use crate::rng::SeededRng;
    use crate::trainer::{fit, DataSplits, TrainConfig};

    fn trained(head: HeadKind) -> (ModelArtifact, DataSplits) {
        let mut rng = SeededRng::new(3);
        let data = make_blobs(300, 3, 4, 4.0, &mut rng).unwrap();
        let splits = DataSplits::three_way(&data, 0.2, 0.2, &mut rng).unwrap();
        let config = TrainConfig {
            max_epochs: 15,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let fitted = fit(head, &splits, &config).unwrap();
        let cal = calibrate(
            &fitted.classifier,
            &splits.calibration,
            NonconformityMeasure::NegProb,
        )
        .unwrap();
        let art = ModelArtifact::from_classifier(&fitted.classifier).with_calibration(cal);
        (art, splits)
    }

    #[test]
    fn round_trip_predictions_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for head in [HeadKind::Softmax, HeadKind::Dwac] {
            let (art, splits) = trained(head);
            let path = dir.path().join(format!("{head}.json"));
            art.save(&path).unwrap();
            let loaded = ModelArtifact::load(&path).unwrap();
            assert_eq!(loaded, art);

            let before = art
                .to_classifier()
                .unwrap()
                .predict(&splits.test.features)
                .unwrap();
            let after = loaded
                .to_classifier()
                .unwrap()
                .predict(&splits.test.features)
                .unwrap();
            assert_eq!(
                serde_json::to_string(&before).unwrap(),
                serde_json::to_string(&after).unwrap()
            );

            let cp_before = art.to_conformal(NonconformityMeasure::NegProb).unwrap();
            let cp_after = loaded.to_conformal(NonconformityMeasure::NegProb).unwrap();
            assert_eq!(
                cp_before.credibilities(&splits.test.features).unwrap(),
                cp_after.credibilities(&splits.test.features).unwrap()
            );
        }
    }

    #[test]
    fn tampered_version_is_rejected() {
        let (art, _) = trained(HeadKind::Softmax);
        let text = art.to_json().unwrap().replace(FORMAT_VERSION, "dwac-kit/2");
        assert!(matches!(
            ModelArtifact::from_json(&text),
            Err(DwacError::Format(_))
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (art, _) = trained(HeadKind::Dwac);
        let text = art.to_json().unwrap();
        assert!(ModelArtifact::from_json(&text[..text.len() / 2]).is_err());
    }

    #[test]
    fn dwac_without_reference_is_rejected() {
        let (mut art, _) = trained(HeadKind::Dwac);
        art.reference = None;
        let text = serde_json::to_string(&art).unwrap();
        assert!(matches!(
            ModelArtifact::from_json(&text),
            Err(DwacError::Format(_))
        ));
    }

    #[test]
    fn numbers_are_decimal_strings() {
        let (art, _) = trained(HeadKind::Dwac);
        let v: serde_json::Value = serde_json::from_str(&art.to_json().unwrap()).unwrap();
        assert_eq!(v["format"], FORMAT_VERSION);
        assert!(v["layers"][0]["weights"]["data"][0].is_string());
        assert!(v["reference"]["embeddings"]["data"][0].is_string());
        assert!(v["kernel"]["sigma"].is_string());
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "second");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
