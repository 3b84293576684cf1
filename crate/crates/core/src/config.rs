//! Single-document run configuration.

use serde::{Deserialize, Serialize};

use crate::corpus::GeneratorSpec;
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Every section is optional and falls back to its defaults; unknown keys
/// are rejected at any depth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricConfig,
    pub data: GeneratorSpec,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks every section; the model section is checked with a
    /// placeholder vocabulary size when none has been set yet.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.metrics.validate()?;
        self.data.validate()?;
        let mut probe = self.resolved_model(self.model.vocab_size.max(7));
        probe.max_len = probe.max_len.max(2);
        probe.validate()
    }

    /// Model config with the training strategy, codebook count and the
    /// given vocabulary size applied.
    pub fn resolved_model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            strategy: self.train.strategy,
            codebook_count: self.train.codebook_count,
            ..self.model.clone()
        }
    }
}
