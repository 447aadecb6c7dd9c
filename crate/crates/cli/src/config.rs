use std::path::Path;

use rhythm_ssm::denoiser::{DiffusionConfig, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// File-level configuration. Every section is optional and falls back to the
/// library defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Size of the synthetic training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub sequences: usize,
    pub len: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { sequences: 256, len: 64, seed: 0 }
    }
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.diffusion.validate()?;
        self.train.validate()?;
        if self.data.sequences == 0 || self.data.len < 2 {
            return Err(CliError::input("data needs at least one sequence of two frames"));
        }
        Ok(())
    }
}
