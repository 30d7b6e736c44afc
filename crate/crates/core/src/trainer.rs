//! Minibatch training with early stopping on calibration-set accuracy.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Preprocessor, RawTable, Schema};
use crate::error::{invalid, DwacError, Result};
use crate::eval::accuracy;
use crate::heads::{
    dwac_batch_loss, softmax_batch_loss, Classifier, EmbeddedTrainingSet, GaussianKernel, HeadKind,
};
use crate::net::{adam_step, AdamState, EmbeddingModel, MlpSpec, Mode};
use crate::rng::{shuffle_split, SeededRng};

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub dropout_prob: f64,
    /// Width of `h` for the weighted averaging head; `None` means the number
    /// of classes. The softmax head always uses the number of classes.
    pub h_dim: Option<usize>,
    pub sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 0.001,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            dropout_prob: 0.2,
            h_dim: None,
            sigma: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(invalid(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.patience < 1 {
            return Err(invalid("patience must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.h_dim == Some(0) {
            return Err(invalid("h_dim must be positive"));
        }
        GaussianKernel::new(self.sigma)?;
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Proper training, calibration (doubling as validation) and test sets.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub proper_train: Dataset,
    pub calibration: Dataset,
    pub test: Dataset,
}

impl DataSplits {
    /// Splits `pool` into proper training and calibration parts; `test` is
    /// kept as given.
    pub fn from_pool(
        pool: &Dataset,
        test: Dataset,
        calibration_fraction: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if !(calibration_fraction > 0.0 && calibration_fraction < 1.0) {
            return Err(invalid(format!(
                "calibration fraction must be in (0, 1), got {calibration_fraction}"
            )));
        }
        let parts = shuffle_split(
            pool.len(),
            &[1.0 - calibration_fraction, calibration_fraction],
            rng,
        )?;
        Ok(Self {
            proper_train: pool.subset(&parts[0]),
            calibration: pool.subset(&parts[1]),
            test,
        })
    }

    /// Three-way split of one dataset: test first, then calibration out of the
    /// rest.
    pub fn three_way(
        data: &Dataset,
        test_fraction: f64,
        calibration_fraction: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let parts = shuffle_split(data.len(), &[1.0 - test_fraction, test_fraction], rng)?;
        let pool = data.subset(&parts[0]);
        Self::from_pool(&pool, data.subset(&parts[1]), calibration_fraction, rng)
    }

    /// Splits raw rows the same way as [`DataSplits::three_way`] (or against a
    /// separate `test` table) and fits normalization and vocabularies on the
    /// proper training rows only.
    pub fn from_table(
        schema: &Schema,
        table: &RawTable,
        test: Option<&RawTable>,
        test_fraction: f64,
        calibration_fraction: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if !(calibration_fraction > 0.0 && calibration_fraction < 1.0) {
            return Err(invalid(format!(
                "calibration fraction must be in (0, 1), got {calibration_fraction}"
            )));
        }
        let rows = |idx: &[usize]| RawTable {
            header: table.header.clone(),
            rows: idx.iter().map(|&i| table.rows[i].clone()).collect(),
        };
        let (pool, held_test) = match test {
            Some(_) => ((0..table.rows.len()).collect::<Vec<_>>(), None),
            None => {
                let parts =
                    shuffle_split(table.rows.len(), &[1.0 - test_fraction, test_fraction], rng)?;
                (parts[0].clone(), Some(rows(&parts[1])))
            }
        };
        let parts = shuffle_split(
            pool.len(),
            &[1.0 - calibration_fraction, calibration_fraction],
            rng,
        )?;
        let pick = |p: &[usize]| rows(&p.iter().map(|&i| pool[i]).collect::<Vec<_>>());
        let proper_raw = pick(&parts[0]);
        let preprocessor = Preprocessor::fit(schema, &proper_raw)?;
        let test_raw = test
            .or(held_test.as_ref())
            .expect("test rows come from one source");
        Ok(Self {
            proper_train: preprocessor.transform(&proper_raw)?,
            calibration: preprocessor.transform(&pick(&parts[1]))?,
            test: preprocessor.transform(test_raw)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn best_accuracy(&self) -> Option<f64> {
        let best = self.best_epoch?;
        self.epochs
            .iter()
            .find(|r| r.epoch == best)
            .map(|r| r.val_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_accuracy\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{:?},{:?}", r.epoch, r.train_loss, r.val_accuracy);
        }
        out
    }
}

/// A fresh model with the tabular architecture for `head`.
pub fn build_model(
    head: HeadKind,
    input_dim: usize,
    num_classes: usize,
    config: &TrainConfig,
) -> Result<EmbeddingModel> {
    config.validate()?;
    let h_dim = match head {
        HeadKind::Softmax => num_classes,
        HeadKind::Dwac => config.h_dim.unwrap_or(num_classes),
    };
    let spec = MlpSpec::tabular(input_dim, h_dim, config.dropout_prob)?;
    let mut rng = SeededRng::new(config.seed).child(INIT_STREAM);
    EmbeddingModel::init(spec, head, GaussianKernel::new(config.sigma)?, &mut rng)
}

/// Eval-mode embeddings of the proper training set.
pub fn embed_training_set(
    model: &EmbeddingModel,
    proper_train: &Dataset,
) -> Result<EmbeddedTrainingSet> {
    let h = model.embed(&proper_train.features)?;
    EmbeddedTrainingSet::new(
        h,
        proper_train.labels.clone(),
        proper_train.num_classes,
        model.kernel(),
    )
}

/// Wraps a model with what its head needs for prediction.
pub fn classifier_for(model: EmbeddingModel, proper_train: &Dataset) -> Result<Classifier> {
    match model.head() {
        HeadKind::Softmax => Classifier::softmax(model),
        HeadKind::Dwac => {
            let reference = embed_training_set(&model, proper_train)?;
            Classifier::dwac(model, reference)
        }
    }
}

/// Trains `model` on the proper training set and returns the parameters with
/// the best calibration accuracy, together with the per-epoch history.
///
/// Each epoch shuffles the proper training set into minibatches. For the
/// weighted averaging head a trailing batch of one is dropped, since the
/// leave-one-out estimate needs a partner. Validation always predicts with
/// the full embedded proper training set.
pub fn train(
    model: EmbeddingModel,
    splits: &DataSplits,
    config: &TrainConfig,
) -> Result<(EmbeddingModel, TrainHistory)> {
    config.validate()?;
    let proper = &splits.proper_train;
    let head = model.head();
    if proper.is_empty() {
        return Err(DwacError::Empty("proper training set"));
    }
    if splits.calibration.is_empty() {
        return Err(DwacError::Empty("calibration set"));
    }
    if head == HeadKind::Dwac && proper.len() < 2 {
        return Err(invalid(
            "the dwac head needs at least two proper training instances",
        ));
    }
    if head == HeadKind::Softmax && model.h_dim() != proper.num_classes {
        return Err(invalid(format!(
            "softmax head has h-dim {} but there are {} classes",
            model.h_dim(),
            proper.num_classes
        )));
    }

    let mut history = TrainHistory::default();
    if config.max_epochs == 0 {
        return Ok((model, history));
    }

    let mut rng = SeededRng::new(config.seed).child(TRAIN_STREAM);
    let mut adam = AdamState::new(&model, config.learning_rate)?;
    let mut model = model;
    let mut best = model.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut since_best = 0;
    let min_batch = if head == HeadKind::Dwac { 2 } else { 1 };

    for epoch in 1..=config.max_epochs {
        let order = rng.permutation(proper.len());
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < min_batch {
                continue;
            }
            let x = proper.features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| proper.labels[i]).collect();
            let (h, cache) = model.forward(&x, Mode::Train, &mut rng)?;
            let (loss, d_h) = match head {
                HeadKind::Softmax => softmax_batch_loss(&h, &y)?,
                HeadKind::Dwac => dwac_batch_loss(&h, &y, proper.num_classes, model.kernel())?,
            };
            if !loss.is_finite() {
                return Err(DwacError::NonFinite(format!(
                    "training loss {loss} at epoch {epoch}, batch {}",
                    batches + 1
                )));
            }
            let grads = model.backward(&cache, &d_h)?;
            adam_step(&mut model, &grads, &mut adam)?;
            loss_sum += loss;
            batches += 1;
        }

        let classifier = classifier_for(model.clone(), proper)?;
        let preds = classifier.predict(&splits.calibration.features)?;
        let val_accuracy = accuracy(&preds, &splits.calibration.labels)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_accuracy,
        });

        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best = model.clone();
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok((best, history))
}

/// A trained classifier and the history that produced it.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub classifier: Classifier,
    pub history: TrainHistory,
}

/// Builds, trains and wraps a model for `head` on `splits`.
pub fn fit(head: HeadKind, splits: &DataSplits, config: &TrainConfig) -> Result<Fitted> {
    let proper = &splits.proper_train;
    let model = build_model(head, proper.dim(), proper.num_classes, config)?;
    let (model, history) = train(model, splits, config)?;
    Ok(Fitted {
        classifier: classifier_for(model, proper)?,
        history,
    })
}
