//! Experiment configuration file (JSON, unknown keys rejected).

use std::path::Path;

use embodiflow_core::adapt::{AdaptConfig, RolloutConfig};
use embodiflow_core::dataset::ChunkSpec;
use embodiflow_core::model::ModelConfig;
use embodiflow_core::trainer::OptimConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub suite_seed: u64,
    /// Seed of the demonstration generator.
    pub data_seed: u64,
    /// Training episodes per pretraining domain.
    pub episodes_per_domain: usize,
    /// Extra episodes per domain held out for validation.
    pub val_episodes: usize,
    /// Training episodes for the held-out embodiment.
    pub target_episodes: usize,
    /// Validation scores every `val_stride`-th step of held-out episodes.
    pub val_stride: usize,
    pub chunk: ChunkSpec,
    /// Mixture weights by domain id; empty means the suite weights.
    pub mixture: Vec<(String, f64)>,
    /// Model initialization and training seed.
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub adapt: AdaptConfig,
    pub rollout: RolloutConfig,
    /// Output root; `--out` and the environment take precedence.
    pub out_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            suite_seed: 0,
            data_seed: 1,
            episodes_per_domain: 100,
            val_episodes: 10,
            target_episodes: 50,
            val_stride: 10,
            chunk: ChunkSpec::default(),
            mixture: Vec::new(),
            seed: 0,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            adapt: AdaptConfig::default(),
            rollout: RolloutConfig::default(),
            out_dir: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| inv(&e))?;
        self.optim.validate().map_err(|e| inv(&e))?;
        self.adapt.validate().map_err(|e| inv(&e))?;
        if self.chunk.anchors != self.model.chunk_len {
            return Err(ConfigError::Invalid(format!(
                "chunk.anchors ({}) must equal model.chunk_len ({})",
                self.chunk.anchors, self.model.chunk_len
            )));
        }
        if self.chunk.horizon_s.is_nan() || self.chunk.horizon_s <= 0.0 {
            return Err(ConfigError::Invalid("chunk.horizon_s must be positive".into()));
        }
        if self.episodes_per_domain == 0 || self.val_episodes == 0 || self.val_stride == 0 {
            return Err(ConfigError::Invalid("episode counts and val_stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str, path: &str) -> Result<Self, ConfigError> {
        let c: Self = serde_json::from_str(text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
        Self::from_json(&text, &p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
