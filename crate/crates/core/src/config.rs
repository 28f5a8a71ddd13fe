//! Experiment configuration: a flat TOML file of typed keys, every key
//! optional, unknown keys rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lr_probe::LrTrainConfig;
use crate::mlp::{CheckpointSchedule, MlpError, MlpSpec, TrainConfig, DESK_WIDTHS, PAPER_WIDTHS};
use crate::probes::{ProbeKind, DEFAULT_VARIANCE_THRESHOLD};

/// Environment variable overriding `out_dir`.
pub const OUT_ENV: &str = "MEMPROBE_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("config key `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// IDX files `train-*` and `t10k-*` under `data_dir`.
    Mnist,
    /// Gaussian class mixture, see [`crate::data::synth_mixture`].
    Synthetic,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    /// Training samples drawn from the full set; 0 keeps all.
    pub train_limit: usize,
    /// Test samples drawn from the full set; 0 keeps all.
    pub test_limit: usize,
    /// Seed of the subset draw, shared by every run.
    pub subset_seed: u64,

    pub synthetic_classes: usize,
    pub synthetic_dim: usize,
    pub synthetic_train_per_class: usize,
    pub synthetic_test_per_class: usize,
    pub synthetic_spread: f64,

    pub degrees: Vec<f64>,
    pub seeds: Vec<u64>,

    pub hidden_widths: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub stop_train_accuracy: f64,
    /// Checkpoint epochs; empty means every 2nd epoch to 20, then every 5th.
    pub schedule: Vec<usize>,

    pub probes: Vec<ProbeKind>,
    pub threshold: f64,
    pub lr_epochs: usize,
    pub lr_learning_rate: f64,
    pub lr_batch_size: usize,

    pub trigger_epoch: usize,
    pub continue_epochs: usize,

    pub out_dir: PathBuf,
    /// Also write fitted probes (`SUBS`, `VELP`, `LRPB`) into checkpoints.
    pub store_probe_artifacts: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist"),
            train_limit: 10_000,
            test_limit: 10_000,
            subset_seed: 0,
            synthetic_classes: 10,
            synthetic_dim: 32,
            synthetic_train_per_class: 100,
            synthetic_test_per_class: 100,
            synthetic_spread: 0.15,
            degrees: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            seeds: vec![0, 1, 2],
            hidden_widths: DESK_WIDTHS.to_vec(),
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 120,
            stop_train_accuracy: 0.99,
            schedule: Vec::new(),
            probes: vec![ProbeKind::Masc, ProbeKind::Velpic, ProbeKind::Lr],
            threshold: DEFAULT_VARIANCE_THRESHOLD,
            lr_epochs: 20,
            lr_learning_rate: 1e-3,
            lr_batch_size: 128,
            trigger_epoch: 40,
            continue_epochs: 60,
            out_dir: PathBuf::from("runs"),
            store_probe_artifacts: false,
        }
    }
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        message: message.into(),
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Syntax {
            line: e.span().map_or(1, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The effective configuration with every key spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Full-size run: wide layers, whole splits, 500-epoch cap.
    pub fn paper_scale(&mut self) {
        self.paper_widths();
        self.train_limit = 0;
        self.test_limit = 0;
        self.max_epochs = 500;
    }

    pub fn paper_widths(&mut self) {
        self.hidden_widths = PAPER_WIDTHS.to_vec();
    }

    /// Applies [`OUT_ENV`] when it is set and non-empty.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            self.out_dir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.degrees.is_empty() {
            return Err(invalid("degrees", "at least one corruption degree is required"));
        }
        if let Some(d) = self.degrees.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(invalid("degrees", format!("{d} is outside [0, 1]")));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(invalid("hidden_widths", "needs at least one layer, all widths >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum", "must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if !(self.stop_train_accuracy > 0.0 && self.stop_train_accuracy <= 1.0) {
            return Err(invalid("stop_train_accuracy", "must be in (0, 1]"));
        }
        if !self.schedule.is_empty() {
            CheckpointSchedule::new(self.schedule.clone()).map_err(|e| invalid("schedule", e.to_string()))?;
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(invalid("threshold", "must be in (0, 1]"));
        }
        if self.lr_epochs == 0 {
            return Err(invalid("lr_epochs", "must be at least 1"));
        }
        if !(self.lr_learning_rate > 0.0 && self.lr_learning_rate.is_finite()) {
            return Err(invalid("lr_learning_rate", "must be positive"));
        }
        if self.lr_batch_size == 0 {
            return Err(invalid("lr_batch_size", "must be at least 1"));
        }
        if self.dataset == DatasetKind::Synthetic {
            if self.synthetic_classes < 2 || self.synthetic_dim == 0 {
                return Err(invalid("synthetic_classes", "needs at least 2 classes and 1 dimension"));
            }
            if self.synthetic_train_per_class == 0 || self.synthetic_test_per_class == 0 {
                return Err(invalid("synthetic_train_per_class", "sample counts must be at least 1"));
            }
            if !(self.synthetic_spread > 0.0 && self.synthetic_spread.is_finite()) {
                return Err(invalid("synthetic_spread", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            stop_train_accuracy: self.stop_train_accuracy,
            seed,
        }
    }

    pub fn lr_config(&self, seed: u64) -> LrTrainConfig {
        LrTrainConfig {
            epochs: self.lr_epochs,
            learning_rate: self.lr_learning_rate,
            batch_size: self.lr_batch_size,
            seed,
            ..LrTrainConfig::default()
        }
    }

    pub fn mlp_spec(&self, input_dim: usize, class_count: usize) -> Result<MlpSpec, MlpError> {
        MlpSpec::new(input_dim, self.hidden_widths.clone(), class_count)
    }

    pub fn checkpoint_schedule(&self) -> CheckpointSchedule {
        if self.schedule.is_empty() {
            CheckpointSchedule::standard(self.max_epochs)
        } else {
            CheckpointSchedule::new(self.schedule.clone()).expect("validated schedule")
        }
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ExperimentConfig::from_toml_str(&text)
}
