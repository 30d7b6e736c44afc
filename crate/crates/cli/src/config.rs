//! Run configuration: a JSON file with command-line overrides on top.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use dwac::data::{make_blobs, RawTable, Schema};
use dwac::{
    default_epsilon_grid, DataSplits, Dataset, HeadKind, NonconformityMeasure, SeededRng,
    TrainConfig,
};

use crate::RunArgs;

/// Stream of the root seed that generates synthetic data.
const DATA_STREAM: u64 = 40;
/// Stream of each trial seed that splits the data.
const SPLIT_STREAM: u64 = 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum HeadChoice {
    Softmax,
    Dwac,
    Both,
}

impl HeadChoice {
    pub fn heads(self) -> Vec<HeadKind> {
        match self {
            HeadChoice::Softmax => vec![HeadKind::Softmax],
            HeadChoice::Dwac => vec![HeadKind::Dwac],
            HeadChoice::Both => vec![HeadKind::Softmax, HeadKind::Dwac],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum MeasureChoice {
    NegProb,
    NegWeightSum,
    Both,
}

impl MeasureChoice {
    pub fn measures(self) -> Vec<NonconformityMeasure> {
        match self {
            MeasureChoice::NegProb => vec![NonconformityMeasure::NegProb],
            MeasureChoice::NegWeightSum => vec![NonconformityMeasure::NegWeightSum],
            MeasureChoice::Both => NonconformityMeasure::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Blobs {
        n: usize,
        classes: usize,
        dim: usize,
        separation: f64,
    },
    Csv {
        path: PathBuf,
        schema: Option<PathBuf>,
        /// Separate test file; otherwise a test fraction is split off.
        test: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Blobs {
            n: 2000,
            classes: 4,
            dim: 4,
            separation: 4.0,
        }
    }
}

impl DataSource {
    /// `blobs` or `blobs:n=2000,c=4,d=4,sep=4` for synthetic data, anything
    /// else is a CSV path.
    pub fn parse(arg: &str) -> Result<Self> {
        let Some(rest) = arg.strip_prefix("blobs") else {
            return Ok(DataSource::Csv {
                path: arg.into(),
                schema: None,
                test: None,
            });
        };
        let mut source = DataSource::default();
        let DataSource::Blobs {
            n,
            classes,
            dim,
            separation,
        } = &mut source
        else {
            return Ok(source);
        };
        for part in rest
            .strip_prefix(':')
            .unwrap_or(rest)
            .split(',')
            .filter(|p| !p.is_empty())
        {
            let (key, value) = part
                .split_once('=')
                .with_context(|| format!("blob option `{part}` is not key=value"))?;
            let bad = || format!("blob option `{part}` has a malformed value");
            match key {
                "n" => *n = value.parse().with_context(bad)?,
                "c" => *classes = value.parse().with_context(bad)?,
                "d" => *dim = value.parse().with_context(bad)?,
                "sep" => *separation = value.parse().with_context(bad)?,
                other => bail!("unknown blob option `{other}` (expected n, c, d, sep)"),
            }
        }
        Ok(source)
    }

    pub fn name(&self) -> String {
        match self {
            DataSource::Blobs { .. } => "blobs".into(),
            DataSource::Csv { path, .. } => path
                .file_stem()
                .map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned()),
        }
    }

    fn schema(&self) -> Result<Schema> {
        match self {
            DataSource::Csv {
                schema: Some(path), ..
            } => Schema::from_json_file(path)
                .with_context(|| format!("reading schema {}", path.display())),
            DataSource::Csv { schema: None, .. } => bail!("CSV data needs --schema"),
            DataSource::Blobs { .. } => bail!("synthetic data has no schema"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OodConfig {
    pub held_class: Option<usize>,
    pub foreign: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSource,
    pub head: HeadChoice,
    pub measure: MeasureChoice,
    pub trials: usize,
    pub seed: u64,
    pub test_fraction: f64,
    pub calibration_fraction: f64,
    pub train: TrainConfig,
    pub epsilon_grid: Vec<f64>,
    pub k_list: Vec<usize>,
    /// Neighbors listed per explanation.
    pub top_k: usize,
    pub ood: OodConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            head: HeadChoice::Both,
            measure: MeasureChoice::Both,
            trials: 5,
            seed: 0,
            test_fraction: 0.1,
            calibration_fraction: 0.1,
            train: TrainConfig::default(),
            epsilon_grid: default_epsilon_grid(),
            k_list: vec![1, 5, 10, 100],
            top_k: 10,
            ood: OodConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str::<RunConfig>(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(data) = &args.data {
            cfg.data = DataSource::parse(data)?;
        }
        if let DataSource::Csv { schema, test, .. } = &mut cfg.data {
            if args.schema.is_some() {
                schema.clone_from(&args.schema);
            }
            if args.test_data.is_some() {
                test.clone_from(&args.test_data);
            }
        }
        if let Some(v) = args.head {
            cfg.head = v;
        }
        if let Some(v) = args.measure {
            cfg.measure = v;
        }
        if let Some(v) = args.h_dim {
            cfg.train.h_dim = Some(v);
        }
        if let Some(v) = args.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = args.max_epochs {
            cfg.train.max_epochs = v;
        }
        if let Some(v) = args.patience {
            cfg.train.patience = v;
        }
        if let Some(v) = args.trials {
            cfg.trials = v;
        }
        if let Some(v) = args.seed {
            cfg.seed = v;
        }
        if let Some(v) = &args.epsilon_grid {
            cfg.epsilon_grid.clone_from(v);
        }
        if let Some(v) = &args.k_list {
            cfg.k_list.clone_from(v);
        }
        if args.held_class.is_some() {
            cfg.ood.held_class = args.held_class;
        }
        if args.foreign.is_some() {
            cfg.ood.foreign.clone_from(&args.foreign);
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.trials == 0 {
            bail!("--trials must be at least 1");
        }
        if self.epsilon_grid.iter().any(|e| !(0.0..=1.0).contains(e)) {
            bail!("epsilon values must lie in [0, 1]");
        }
        if self.k_list.contains(&0) {
            bail!("k values must be at least 1");
        }
        if let DataSource::Blobs {
            n,
            classes,
            dim,
            separation,
        } = self.data
        {
            if classes == 0
                || dim == 0
                || n < classes
                || !(separation.is_finite() && separation > 0.0)
            {
                bail!("blobs need n >= c >= 1, d >= 1 and sep > 0");
            }
        }
        Ok(())
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed + trial as u64
    }

    /// Proper training, calibration and test sets for one trial.
    pub fn splits(&self, seed: u64) -> Result<DataSplits> {
        let mut rng = SeededRng::new(seed).child(SPLIT_STREAM);
        match &self.data {
            DataSource::Blobs { .. } => {
                let data = self.full_dataset()?;
                Ok(DataSplits::three_way(
                    &data,
                    self.test_fraction,
                    self.calibration_fraction,
                    &mut rng,
                )?)
            }
            DataSource::Csv { path, test, .. } => {
                let schema = self.data.schema()?;
                let table = read_table(path, &schema)?;
                let test_table = test
                    .as_deref()
                    .map(|t| read_table(t, &schema))
                    .transpose()?;
                Ok(DataSplits::from_table(
                    &schema,
                    &table,
                    test_table.as_ref(),
                    self.test_fraction,
                    self.calibration_fraction,
                    &mut rng,
                )?)
            }
        }
    }

    /// Every labelled instance. Synthetic data depends on the root seed only,
    /// so it is the same for every trial; CSV data is encoded with statistics
    /// of the whole file.
    pub fn full_dataset(&self) -> Result<Dataset> {
        match &self.data {
            &DataSource::Blobs {
                n,
                classes,
                dim,
                separation,
            } => Ok(make_blobs(
                n,
                classes,
                dim,
                separation,
                &mut SeededRng::new(self.seed).child(DATA_STREAM),
            )?),
            DataSource::Csv { path, .. } => Ok(dwac::load_csv(path, &self.data.schema()?)
                .with_context(|| format!("loading {}", path.display()))?),
        }
    }

    /// Data to score with a saved model, encoded the way the model expects.
    pub fn dataset_for(&self, preprocessor: Option<&dwac::Preprocessor>) -> Result<Dataset> {
        match (&self.data, preprocessor) {
            (DataSource::Blobs { .. }, _) => self.full_dataset(),
            (DataSource::Csv { path, .. }, Some(pre)) => Ok(dwac::load_csv_with(path, pre)
                .with_context(|| format!("loading {}", path.display()))?),
            (DataSource::Csv { .. }, None) => {
                bail!("the model was trained on synthetic data and has no CSV encoding")
            }
        }
    }
}

fn read_table(path: &Path, schema: &Schema) -> Result<RawTable> {
    RawTable::read_for(path, schema).with_context(|| format!("reading {}", path.display()))
}
