use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::amrb::MemoryReport;
use crate::error::Result;

pub const RECORD_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Aborted { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: u32,
    pub config: RunConfig,
    pub content_hash: String,
    pub schedule: Vec<f64>,
    pub epochs: Vec<EpochMetrics>,
    pub memory_report: MemoryReport,
    pub status: RunStatus,
}

impl RunRecord {
    pub fn new(config: RunConfig, schedule: Vec<f64>, memory_report: MemoryReport) -> Result<Self> {
        let content_hash = content_hash(&config)?;
        Ok(Self { schema: RECORD_SCHEMA, config, content_hash, schedule, epochs: Vec::new(), memory_report, status: RunStatus::Completed })
    }

    pub fn push_epoch(&mut self, metrics: EpochMetrics) {
        self.epochs.push(metrics);
    }

    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_accuracy)
    }

    pub fn best_val_accuracy(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_accuracy).reduce(f64::max)
    }

    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        let mut out = self.clone();
        out.epochs.iter_mut().for_each(|e| e.wall_seconds = 0.0);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_accuracy,val_loss,val_accuracy,wall_seconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.epoch, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy, e.wall_seconds
            );
        }
        out
    }

    /// Write `run.json` and `curves.csv` into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("run.json"), serde_json::to_vec_pretty(self)?)?;
        std::fs::write(dir.join("curves.csv"), self.to_csv())?;
        Ok(())
    }
}

/// sha256 over the crate version and the canonical TOML of the config.
pub fn content_hash(config: &RunConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(concat!(env!("CARGO_PKG_NAME"), "@", env!("CARGO_PKG_VERSION")).as_bytes());
    h.update(b"\n");
    h.update(config.to_toml_string()?.as_bytes());
    Ok(hex::encode(h.finalize()))
}
