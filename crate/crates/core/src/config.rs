//! The JSON run configuration shared by every command.
//!
//! ```json
//! {
//!   "seed": 0,
//!   "data": { "generate": { "n": 250 } },
//!   "backbone": { "base_channels": 8 },
//!   "channel": { "sentence_length": 10, "vocab_size": 64 },
//!   "train": { "epochs": 50 },
//!   "analysis": { "min_count": 5 }
//! }
//! ```
//!
//! Only `seed` is required. Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisConfig;
use crate::backbone::BackboneConfig;
use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::GenerateSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Synthetic data to generate.
    pub generate: Option<GenerateSpec>,
    /// Existing dataset directory.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            channel: ChannelConfig::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            analysis: AnalysisConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(g) = &self.data.generate {
            g.validate()?;
        }
        self.backbone.validate()?;
        self.channel.validate()?;
        self.train.validate()?;
        self.analysis.validate()
    }

    pub fn model_config(&self, ablate_channel: bool) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            channel: (!ablate_channel).then(|| self.channel.clone()),
        }
    }
}
