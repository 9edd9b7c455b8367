//! Run configuration in TOML.
//!
//! Every section may be omitted; missing keys take their defaults, which for
//! the model, augmentation and schedule are the full-scale values
//! and the synthetic data takes the model's channel count.
//! [`RunConfig::desk`] is the small setting matched to the synthetic data.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptConfig;
use crate::beam::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::preprocess::AugmentConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    /// Directory for JSONL reports.
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: "data/synth.bin".into(),
            checkpoint: "runs/model.ckpt".into(),
            reports: "runs".into(),
        }
    }
}

/// Chronological session split used by training and adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Days {
    pub train: usize,
    pub heldout: usize,
}

impl Default for Days {
    fn default() -> Self {
        Days { train: 5, heldout: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SynthConfig,
    pub days: Days,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub adapt: AdaptConfig,
    pub paths: Paths,
}

/// Full-scale model, with the synthetic data widened to its channel count.
impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            seed: 0,
            data: SynthConfig {
                channels: model.channels,
                ..SynthConfig::default()
            },
            days: Days::default(),
            model,
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            adapt: AdaptConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale model on the default synthetic dataset.
    pub fn desk() -> Self {
        RunConfig {
            data: SynthConfig::default(),
            model: ModelConfig::desk(),
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Format {
            what: "config",
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        self.adapt.augment.validate()?;
        if self.adapt.z == 0 {
            return Err(Error::invalid("adapt.z must be at least 1"));
        }
        if self.data.channels != self.model.channels {
            return Err(Error::invalid(format!(
                "data.channels {} differs from model.channels {}",
                self.data.channels, self.model.channels
            )));
        }
        if self.days.train + self.days.heldout > self.data.sessions {
            return Err(Error::invalid("days.train + days.heldout exceed data.sessions"));
        }
        Ok(())
    }
}
