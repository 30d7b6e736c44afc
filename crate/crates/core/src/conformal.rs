//! Split-conformal prediction.
//!
//! A nonconformity score `η(x, k)` says how atypical label `k` is for `x`
//! relative to the proper training set. Calibration stores `η(x_j, y_j)` for
//! every calibration pair under its true label; the p-value of a candidate
//! label is the fraction of calibration scores at least as large:
//!
//! ```text
//! p(x, k) = |{ j : η(x_j, y_j) ≥ η(x, k) }| / n_cal
//! ```
//!
//! This is the raw proportion, with no `+1` finite-sample correction and no
//! randomized tie-breaking. For `n_cal` calibration points it can undercover
//! by at most about `1 / (n_cal + 1)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, shape, DwacError, Result};
use crate::heads::{Classifier, HeadKind, PredictionResult};
use crate::linalg::{decimal, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonconformityMeasure {
    /// `−P(y = k | x)`; works with either head.
    NegProb,
    /// `−Σ_i 1[y_i = k] w(h, h_i)` over the proper training set; needs the
    /// weighted averaging head.
    NegWeightSum,
}

impl NonconformityMeasure {
    pub const ALL: [NonconformityMeasure; 2] = [
        NonconformityMeasure::NegProb,
        NonconformityMeasure::NegWeightSum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NonconformityMeasure::NegProb => "neg_prob",
            NonconformityMeasure::NegWeightSum => "neg_weight_sum",
        }
    }

    pub fn supports(self, head: HeadKind) -> bool {
        !(self == NonconformityMeasure::NegWeightSum && head == HeadKind::Softmax)
    }
}

impl std::fmt::Display for NonconformityMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for NonconformityMeasure {
    type Err = DwacError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neg_prob" => Ok(NonconformityMeasure::NegProb),
            "neg_weight_sum" => Ok(NonconformityMeasure::NegWeightSum),
            other => Err(invalid(format!("unknown nonconformity measure `{other}`"))),
        }
    }
}

/// Score of hypothesized label `k` for one prediction.
pub fn nonconformity(
    result: &PredictionResult,
    k: usize,
    measure: NonconformityMeasure,
) -> Result<f64> {
    if k >= result.probs.len() {
        return Err(invalid(format!(
            "class {k} out of range for {} classes",
            result.probs.len()
        )));
    }
    match measure {
        NonconformityMeasure::NegProb => Ok(-result.probs[k]),
        NonconformityMeasure::NegWeightSum => {
            result.weight_sums.as_ref().map(|w| -w[k]).ok_or_else(|| {
                DwacError::Incompatible(
                    "neg_weight_sum needs per-class weight sums (dwac head)".into(),
                )
            })
        }
    }
}

fn check_compatible(classifier: &Classifier, measure: NonconformityMeasure) -> Result<()> {
    if measure.supports(classifier.head()) {
        Ok(())
    } else {
        Err(DwacError::Incompatible(format!(
            "measure {measure} cannot be used with the {} head",
            classifier.head()
        )))
    }
}

/// Sorted true-label nonconformity scores of a calibration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    measure: NonconformityMeasure,
    #[serde(
        serialize_with = "decimal::serialize_vec",
        deserialize_with = "decimal::deserialize_vec"
    )]
    scores: Vec<f64>,
}

impl ConformalCalibration {
    /// Builds a calibration from raw scores in any order.
    pub fn from_scores(measure: NonconformityMeasure, mut scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(DwacError::Empty("calibration scores"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(DwacError::NonFinite("calibration score".into()));
        }
        scores.sort_by(f64::total_cmp);
        Ok(Self { measure, scores })
    }

    pub fn measure(&self) -> NonconformityMeasure {
        self.measure
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Fraction of calibration scores `≥ score`.
    pub fn p_value(&self, score: f64) -> f64 {
        let below = self.scores.partition_point(|&s| s < score);
        (self.scores.len() - below) as f64 / self.scores.len() as f64
    }

    /// Loads stored scores, checking they are still sorted.
    pub(crate) fn validate(&self) -> Result<()> {
        if self.scores.is_empty() {
            return Err(DwacError::Empty("calibration scores"));
        }
        if self.scores.windows(2).any(|w| w[0] > w[1]) {
            return Err(DwacError::Format(
                "calibration scores are not sorted".into(),
            ));
        }
        Ok(())
    }
}

/// Scores every calibration instance under its true label.
pub fn calibrate(
    classifier: &Classifier,
    calibration: &Dataset,
    measure: NonconformityMeasure,
) -> Result<ConformalCalibration> {
    check_compatible(classifier, measure)?;
    if calibration.is_empty() {
        return Err(DwacError::Empty("calibration set"));
    }
    let preds = classifier.predict(&calibration.features)?;
    let scores = preds
        .iter()
        .zip(&calibration.labels)
        .map(|(p, &y)| nonconformity(p, y, measure))
        .collect::<Result<Vec<_>>>()?;
    ConformalCalibration::from_scores(measure, scores)
}

/// Conformal output for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalPrediction {
    pub p_values: Vec<f64>,
    /// Argmax of the underlying model's probabilities.
    pub predicted_label: usize,
    /// `label_set(ε)` for each requested `ε`, in request order.
    pub label_sets: Vec<Vec<usize>>,
}

impl ConformalPrediction {
    pub fn from_p_values(p_values: Vec<f64>, predicted_label: usize, epsilons: &[f64]) -> Self {
        let mut out = Self {
            p_values,
            predicted_label,
            label_sets: Vec::new(),
        };
        out.label_sets = epsilons.iter().map(|&e| out.label_set(e)).collect();
        out
    }

    /// Every label whose p-value exceeds `epsilon`.
    pub fn label_set(&self, epsilon: f64) -> Vec<usize> {
        self.p_values
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > epsilon)
            .map(|(k, _)| k)
            .collect()
    }

    /// Largest p-value.
    pub fn credibility(&self) -> f64 {
        self.p_values.iter().copied().fold(0.0, f64::max)
    }

    /// One minus the second-largest p-value, counting a tied maximum twice.
    pub fn confidence(&self) -> f64 {
        let mut sorted = self.p_values.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        1.0 - sorted.get(1).copied().unwrap_or(0.0)
    }
}

/// p-values of every candidate label for each row of `x`.
pub fn conformal_predict(
    classifier: &Classifier,
    calibration: &ConformalCalibration,
    x: &Matrix,
    epsilons: &[f64],
) -> Result<Vec<ConformalPrediction>> {
    check_compatible(classifier, calibration.measure())?;
    let preds = classifier.predict(x)?;
    preds
        .iter()
        .map(|p| conformal_from_prediction(p, calibration, epsilons))
        .collect()
}

pub(crate) fn conformal_from_prediction(
    p: &PredictionResult,
    calibration: &ConformalCalibration,
    epsilons: &[f64],
) -> Result<ConformalPrediction> {
    let p_values = (0..p.probs.len())
        .map(|k| Ok(calibration.p_value(nonconformity(p, k, calibration.measure())?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConformalPrediction::from_p_values(
        p_values,
        p.predicted_label,
        epsilons,
    ))
}

/// A classifier paired with its calibration scores.
#[derive(Debug, Clone)]
pub struct ConformalClassifier {
    pub classifier: Classifier,
    pub calibration: ConformalCalibration,
}

impl ConformalClassifier {
    pub fn new(
        classifier: Classifier,
        calibration_set: &Dataset,
        measure: NonconformityMeasure,
    ) -> Result<Self> {
        let calibration = calibrate(&classifier, calibration_set, measure)?;
        Ok(Self {
            classifier,
            calibration,
        })
    }

    pub fn predict(&self, x: &Matrix, epsilons: &[f64]) -> Result<Vec<ConformalPrediction>> {
        conformal_predict(&self.classifier, &self.calibration, x, epsilons)
    }

    pub fn credibilities(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self
            .predict(x, &[])?
            .iter()
            .map(ConformalPrediction::credibility)
            .collect())
    }
}

/// The four label-set statistics at one `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub epsilon: f64,
    /// Fraction of label sets containing the true label.
    pub correct: f64,
    pub empty: f64,
    pub multiple: f64,
    /// Mean size over non-empty sets; 0 when every set is empty.
    pub mean_size: f64,
    pub all_empty: bool,
}

pub fn coverage_report(
    predictions: &[ConformalPrediction],
    labels: &[usize],
    epsilons: &[f64],
) -> Result<Vec<CoverageRow>> {
    if predictions.len() != labels.len() {
        return Err(shape(
            "coverage_report",
            format!(
                "{} predictions but {} labels",
                predictions.len(),
                labels.len()
            ),
        ));
    }
    if predictions.is_empty() {
        return Err(DwacError::Empty("predictions"));
    }
    let n = predictions.len() as f64;
    Ok(epsilons
        .iter()
        .map(|&epsilon| {
            let (mut correct, mut empty, mut multiple, mut size_sum) =
                (0usize, 0usize, 0usize, 0usize);
            for (p, &y) in predictions.iter().zip(labels) {
                let set = p.label_set(epsilon);
                correct += set.contains(&y) as usize;
                empty += set.is_empty() as usize;
                multiple += (set.len() > 1) as usize;
                size_sum += set.len();
            }
            let nonempty = predictions.len() - empty;
            CoverageRow {
                epsilon,
                correct: correct as f64 / n,
                empty: empty as f64 / n,
                multiple: multiple as f64 / n,
                mean_size: if nonempty == 0 {
                    0.0
                } else {
                    size_sum as f64 / nonempty as f64
                },
                all_empty: nonempty == 0,
            }
        })
        .collect())
}

/// CSV with columns `epsilon,correct,empty,multiple,mean_size`.
pub fn coverage_csv(rows: &[CoverageRow]) -> String {
    let mut out = String::from("epsilon,correct,empty,multiple,mean_size\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:?},{:?},{:?},{:?},{:?}",
            r.epsilon, r.correct, r.empty, r.multiple, r.mean_size
        );
    }
    out
}

/// `0, 0.01, …, 0.2`.
pub fn default_epsilon_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 100.0).collect()
}
