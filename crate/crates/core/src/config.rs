//! The run document: corpus, model, pretraining, and probe settings in one
//! strict JSON file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ModelConfig;
use crate::probes::ProbeConfig;
use crate::synthdata::{canonical_json, CorpusSpec};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probes: Vec<ProbeConfig>,
    /// Trailing share of the corpus held out from pretraining and probe
    /// training.
    pub test_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            probes: vec![ProbeConfig::default()],
            test_fraction: 0.4,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.encoder.input_dim != self.corpus.feature_dim {
            return Err(crate::CbtError::Config(format!(
                "encoder input width {} does not match corpus feature_dim {}",
                self.model.encoder.input_dim, self.corpus.feature_dim
            )));
        }
        if self.model.vocab != self.corpus.vocab {
            return Err(crate::CbtError::Config(format!(
                "model vocab {} does not match corpus vocab {}",
                self.model.vocab, self.corpus.vocab
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(crate::CbtError::Config(format!("test_fraction {} outside (0, 1)", self.test_fraction)));
        }
        for p in &self.probes {
            p.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Sorted keys, no insignificant whitespace.
    pub fn to_canonical_json(&self) -> Result<String> {
        canonical_json(self)
    }
}
