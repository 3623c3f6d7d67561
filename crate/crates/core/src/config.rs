//! Experiment configuration: one TOML document with a schema version and a
//! table per stage. Unknown keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::DiagnosticsConfig;
use crate::error::{ensure, Error, Result};
use crate::recovery::RecoveryConfig;
use crate::synthbag::GenConfig;
use crate::training::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub generate: GenConfig,
    pub train: TrainConfig,
    pub recovery: RecoveryConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            generate: GenConfig::default(),
            train: TrainConfig::default(),
            recovery: RecoveryConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.schema_version == CONFIG_SCHEMA_VERSION,
            Config,
            "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
            self.schema_version
        );
        self.generate.validate()?;
        self.train.validate()?;
        self.recovery.validate()?;
        self.diagnostics.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }
}
