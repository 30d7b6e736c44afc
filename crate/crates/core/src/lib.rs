//! Kernel-weighted classifiers over learned embeddings.
//!
//! An MLP maps each instance to a low-dimensional embedding. The weighted
//! averaging head predicts class probabilities as kernel-weighted votes of the
//! embedded training set, which makes every prediction explainable by its
//! nearest training instances and gives a natural nonconformity score for
//! conformal prediction. A softmax head on the same network serves as the
//! baseline.
//!
//! ```
//! use dwac::{fit, make_blobs, DataSplits, HeadKind, SeededRng, TrainConfig};
//!
//! let mut rng = SeededRng::new(7);
//! let data = make_blobs(300, 3, 2, 8.0, &mut rng)?;
//! let splits = DataSplits::three_way(&data, 0.2, 0.2, &mut rng)?;
//! let config = TrainConfig { max_epochs: 20, ..TrainConfig::default() };
//! let fitted = fit(HeadKind::Dwac, &splits, &config)?;
//! let preds = fitted.classifier.predict(&splits.test.features)?;
//! assert_eq!(preds.len(), splits.test.len());
//! # Ok::<(), dwac::DwacError>(())
//! ```

pub mod artifact;
pub mod conformal;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod heads;
pub mod linalg;
pub mod net;
pub mod rng;
pub mod trainer;

pub use artifact::{write_atomic, ModelArtifact, FORMAT_VERSION};
pub use conformal::{
    calibrate, conformal_predict, coverage_csv, coverage_report, default_epsilon_grid,
    ConformalCalibration, ConformalClassifier, ConformalPrediction, CoverageRow,
    NonconformityMeasure,
};
pub use data::{
    load_csv, load_csv_with, make_blobs, make_blobs_at, Dataset, Preprocessor, RawTable, Schema,
};
pub use error::{DwacError, Result};
pub use eval::{
    accuracy, calibration_mae, ood_cross_dataset, ood_holdout_class, CalibrationMae, OodReport,
};
pub use explain::{agreement_at_k, explain, Explanation, TopK};
pub use heads::{Classifier, EmbeddedTrainingSet, GaussianKernel, HeadKind, PredictionResult};
pub use linalg::Matrix;
pub use net::{EmbeddingModel, MlpSpec};
pub use rng::SeededRng;
pub use trainer::{fit, DataSplits, Fitted, TrainConfig, TrainHistory};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/weighted_averaging.md")]
    mod weighted_averaging {}
    #[doc = include_str!("../../../book/src/conformal.md")]
    mod conformal {}
    #[doc = include_str!("../../../book/src/explanations.md")]
    mod explanations {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/artifacts.md")]
    mod artifacts {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
