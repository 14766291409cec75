//! Run configuration: one TOML file describing the metric, the network, the
//! training schedule, and (optionally) a dataset recipe.
//!
//! Every command that produces an artifact writes its fully-resolved
//! configuration next to the output, so any result can be reproduced from
//! the files it left behind.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::NetworkConfig;
use crate::preprocess::MetricConfig;
use crate::presets::GeneratorConfig;
use crate::train::TrainConfig;

/// How to derive the learning/validation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fraction: 0.10,
            seed: 0,
        }
    }
}

/// The aggregate configuration for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub metric: MetricConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    /// Present when the config doubles as a dataset recipe for `synth`.
    pub generator: Option<GeneratorConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            metric: MetricConfig::for_sample_rate(6400.0),
            network: NetworkConfig::reference(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            generator: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.metric
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.network
            .shapes()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.metric.input_len != self.network.input_len {
            return Err(ConfigError::Invalid(format!(
                "metric cuts {}-sample slices but the network expects {}",
                self.metric.input_len, self.network.input_len
            )));
        }
        if !(self.split.fraction > 0.0 && self.split.fraction < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "split fraction must be in (0, 1), got {}",
                self.split.fraction
            )));
        }
        if self.train.group_size == 0 {
            return Err(ConfigError::Invalid("group_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("i/o error reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes the resolved configuration (TOML) next to an output artifact.
pub fn write_resolved_config(cfg: &RunConfig, artifact: &Path) -> Result<(), ConfigError> {
    let text = toml::to_string_pretty(cfg).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let mut name = artifact
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    name.push_str(".config.toml");
    let path = artifact.with_file_name(name);
    std::fs::write(path, text)?;
    Ok(())
}
