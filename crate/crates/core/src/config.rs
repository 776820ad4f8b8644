//! TOML experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bars::{ChannelLabeling, DEFAULT_MARGIN, DEFAULT_NOISE_SIGMA};
use crate::error::{DanError, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory written by `gen-bars`; generated on the fly when absent.
    pub path: Option<PathBuf>,
    pub n_examples: usize,
    pub split: f64,
    pub margin: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, n_examples: 1000, split: 0.75, margin: DEFAULT_MARGIN }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: Option<String>,
    pub trials: usize,
    pub epochs: usize,
    pub noise_sigma: f64,
    pub labeling: ChannelLabeling,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self { name: None, trials: 20, epochs: 50, noise_sigma: DEFAULT_NOISE_SIGMA, labeling: ChannelLabeling::Matched }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| DanError::Config(e.to_string()))?;
        cfg.train.optimizer.validate().map_err(|e| DanError::Config(e.to_string()))?;
        if cfg.train.batch_size == 0 {
            return Err(DanError::Config("train.batch_size must be positive".into()));
        }
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DanError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(p), Some(dir)) = (&cfg.data.path, path.parent()) {
            if p.is_relative() {
                cfg.data.path = Some(dir.join(p));
            }
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn check_paths(&self) -> Result<()> {
        if let Some(p) = &self.data.path {
            if !p.exists() {
                return Err(DanError::Config(format!("data path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
