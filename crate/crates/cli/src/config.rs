//! TOML run configuration: model, training schedule and synthesis ranges.
//!
//! Every field is optional; missing fields take the documented defaults and
//! unknown keys are rejected.

use std::path::Path;

use glsgn::model::GlsgnConfig;
use glsgn::synth::SynthRanges;
use glsgn::train::TrainRun;
use glsgn::Error;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub model: GlsgnConfig,
    pub train: TrainRun,
    pub synth: SynthRanges,
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let cfg: CliConfig = toml::from_str(text).map_err(|e| Error::Config {
            key: e.span().map_or_else(String::new, |s| format!("at bytes {}..{}", s.start, s.end)),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Validation errors carry the full dotted key, e.g. `model.geometry[1]`.
    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate().map_err(|e| match e {
            Error::Config { key, message } if !key.starts_with("model.") => Error::Config {
                key: format!("model.{key}"),
                message,
            },
            other => other,
        })?;
        self.train.validate(&self.model)?;
        self.synth.validate()
    }
}
