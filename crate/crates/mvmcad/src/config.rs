//! Run configuration, read from JSON with unknown keys rejected.

use std::path::{Path, PathBuf};

use mvmcad_core::model::ModelConfig;
use mvmcad_core::optim::OptimizerConfig;
use mvmcad_core::scoring::{default_sigma, ScoreReduction};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            batch_size: 8,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    /// Blur sigma in output pixels; scaled from the 392 px reference when absent.
    pub sigma: Option<f64>,
    pub reduction: ScoreReduction,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            sigma: None,
            reduction: ScoreReduction::TopPercent,
        }
    }
}

impl ScoringConfig {
    pub fn sigma_for(&self, image_size: usize) -> f64 {
        self.sigma.unwrap_or_else(|| default_sigma(image_size))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub categories: Vec<String>,
    pub views: usize,
    pub train_samples: usize,
    pub test_normal: usize,
    pub test_defective: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            categories: vec!["disc".into(), "plate".into()],
            views: 5,
            train_samples: 50,
            test_normal: 20,
            test_defective: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Validation("train.batch_size must be positive".into()));
        }
        if self.data.views == 0 {
            return Err(Error::Validation("data.views must be positive".into()));
        }
        if let Some(s) = self.scoring.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Validation(format!("scoring.sigma {s} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}
