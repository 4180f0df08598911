use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::CalibScenario;
use crate::block::{BlockConfig, DEFAULT_ACTIVE_STAGES, DEFAULT_STRIDE};
use crate::error::{Error, Result};

fn default_stride() -> usize {
    DEFAULT_STRIDE
}

fn default_stages() -> Vec<usize> {
    DEFAULT_ACTIVE_STAGES.to_vec()
}

fn default_true() -> bool {
    true
}

/// Strict JSON run configuration; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RunConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_stages")]
    pub active_stages: Vec<usize>,
    #[serde(default = "default_true")]
    pub bias_enabled: bool,
    /// Scenario misregistration `[dy, dx]`.
    #[serde(default)]
    pub shift: [i64; 2],
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub smoothing: usize,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.block_config().validate()?;
        let mut seen = self.active_stages.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.active_stages.len() || seen.first() == Some(&0) {
            return Err(Error::Config(format!(
                "active stages {:?} must be distinct and 1-based",
                self.active_stages
            )));
        }
        Ok(())
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            channels: self.channels,
            height: self.height,
            width: self.width,
            stride: self.stride,
            seed: self.seed,
            bias_enabled: self.bias_enabled,
        }
    }

    pub fn scenario(&self) -> CalibScenario {
        CalibScenario {
            channels: self.channels,
            height: self.height,
            width: self.width,
            shift: (self.shift[0], self.shift[1]),
            noise_std: self.noise_std,
            seed: self.seed,
            smoothing: self.smoothing,
        }
    }
}
