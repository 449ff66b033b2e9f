//! TOML run configuration.
//!
//! Every section and key is optional and defaults to the library defaults.
//! Unknown keys are rejected. Command-line flags override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use renas::costmodel::Skeleton;
use renas::datastore::{SplitStrategy, SurrogateConfig};
use renas::encoder::{Broadcast, Encoder, FeatureSet};
use renas::evosearch::EaConfig;
use renas::ranking::LossConfig;
use renas::tensornet::PredictorArch;
use renas::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("missing required setting `{0}` (flag or [paths] key)")]
    Missing(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub broadcast: Broadcast,
    pub features: FeatureSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub fraction: Option<f64>,
    pub strategy: SplitStrategy,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub holdout: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub skeleton: Skeleton,
    pub arch: PredictorArch,
    pub encoder: EncoderSection,
    pub loss: LossConfig,
    pub training: TrainConfig,
    pub search: EaConfig,
    pub surrogate: SurrogateConfig,
    pub split: SplitSection,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text).map_err(|msg| ConfigError::Parse { path: path.display().to_string(), msg })
    }

    pub fn parse(text: &str) -> Result<RunConfig, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn encoder(&self) -> Encoder {
        Encoder { skeleton: self.skeleton, broadcast: self.encoder.broadcast, features: self.encoder.features }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.skeleton.validate().map_err(|e| invalid(&e))?;
        self.arch.validate().map_err(|e| invalid(&e))?;
        self.loss.validate().map_err(|e| invalid(&e))?;
        self.training.validate().map_err(|e| invalid(&e))?;
        self.search.validate().map_err(|e| invalid(&e))?;
        let s = &self.surrogate;
        if !(s.clamp_lo <= s.clamp_hi && s.noise_amp >= 0.0) {
            return Err(ConfigError::Invalid("surrogate needs clamp_lo <= clamp_hi and noise_amp >= 0".into()));
        }
        if let Some(f) = self.split.fraction.filter(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(ConfigError::Invalid(format!("split fraction {f} outside (0, 1)")));
        }
        Ok(())
    }
}
