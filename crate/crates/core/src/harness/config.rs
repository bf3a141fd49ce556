//! Run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tasks::{TaskKind, TaskSpec};
use crate::amrb::RolloutKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::retention::MacroModel;
use crate::rng::{derive_seed, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub alphabet_size: usize,
    pub total_len: usize,
    pub n_classes: usize,
    pub n_pairs: usize,
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { kind: TaskKind::Copy, alphabet_size: 8, total_len: 32, n_classes: 8, n_pairs: 2, n_train: 1024, n_val: 256 }
    }
}

impl TaskConfig {
    fn spec(&self, n_samples: usize, seed: u64) -> TaskSpec {
        TaskSpec {
            kind: self.kind,
            alphabet_size: self.alphabet_size,
            total_len: self.total_len,
            n_classes: self.n_classes,
            n_pairs: self.n_pairs,
            n_samples,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub rollout: RolloutKind,
    pub optimizer: AdamWConfig,
    /// Stop early once validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            rollout: RolloutKind::Amrb,
            optimizer: AdamWConfig { lr: 3e-3, ..AdamWConfig::default() },
            target_accuracy: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Derived,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetentionConfig {
    pub schedule: ScheduleKind,
    /// Directory for precomputed schedules; defaults to `<out_dir>/schedules`.
    pub cache_dir: Option<PathBuf>,
    #[serde(rename = "macro")]
    pub macro_model: MacroModel,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        Self { schedule: ScheduleKind::Derived, cache_dir: None, macro_model: MacroModel::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed for data, initialization and dropout. Must fit in 63 bits.
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub retention: RetentionConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::InvalidArgument(msg) => Error::Config(msg),
            other => other,
        };
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} does not fit in 63 bits", self.seed)));
        }
        self.model.validate().map_err(cfg_err)?;
        self.train.optimizer.validate().map_err(cfg_err)?;
        self.task.spec(1, 0).validate().map_err(cfg_err)?;
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.task.n_train == 0 || self.task.n_val == 0 {
            return Err(Error::Config("n_train and n_val must be positive".into()));
        }
        if self.task.total_len > self.model.max_len() {
            return Err(Error::Config(format!(
                "task sequences of {} tokens exceed {} segments of {}",
                self.task.total_len, self.model.n_segments, self.model.seg_len
            )));
        }
        if self.task.n_classes != self.model.n_classes {
            return Err(Error::Config(format!(
                "task has {} classes, model head has {}",
                self.task.n_classes, self.model.n_classes
            )));
        }
        let vocab = self.task_spec_train().vocab_size();
        if self.model.vocab_size < vocab {
            return Err(Error::Config(format!("task needs vocab_size >= {vocab}, model has {}", self.model.vocab_size)));
        }
        if self.task.kind == TaskKind::KvRetrieval && 2 * self.task.n_pairs > self.model.seg_len {
            return Err(Error::Config("key-value pairs must fit in the first segment".into()));
        }
        Ok(())
    }

    pub fn task_spec_train(&self) -> TaskSpec {
        self.task.spec(self.task.n_train, derive_seed(self.seed, Stream::Data, 0))
    }

    pub fn task_spec_val(&self) -> TaskSpec {
        self.task.spec(self.task.n_val, derive_seed(self.seed, Stream::Validation, 0))
    }

    /// Copy of this config with the model vocabulary sized for the task.
    pub fn with_task_vocab(mut self) -> Self {
        self.model.vocab_size = self.task_spec_train().vocab_size();
        self.model.n_classes = self.task.n_classes;
        self
    }
}
