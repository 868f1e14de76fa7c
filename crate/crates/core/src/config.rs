//! The engine configuration document.
//!
//! One TOML file with `[tissue]`, `[scene]`, `[loop]`, `[control]` and
//! `[session]` tables. Every table and field is optional; omitted values take
//! the built-in defaults. See `config/default.toml` for the full document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::control::ControlConfig;
use crate::haptics::LoopConfig;
use crate::scene::SceneConfig;
use crate::session::SessionConfig;
use crate::tissue::TissueParams;

/// Environment variable naming the config file when `--config` is not given.
pub const CONFIG_ENV: &str = "ESS_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub tissue: TissueParams,
    pub scene: SceneConfig,
    #[serde(rename = "loop")]
    pub loop_cfg: LoopConfig,
    pub control: ControlConfig,
    pub session: SessionConfig,
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validated()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    /// Reads `path`, else the file named by `ESS_CONFIG`, else the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        match path.map(Path::to_path_buf).or(env_path) {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|source| ConfigError::Io {
                    path: p.clone(),
                    source,
                })?;
                Self::from_toml(&text)
            }
            None => Ok(Self::default()),
        }
    }

    pub fn validated(mut self) -> Result<Self, ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.tissue.validate().map_err(|e| invalid(&e))?;
        self.scene = self.scene.validated().map_err(|e| invalid(&e))?;
        self.loop_cfg.validate().map_err(|e| invalid(&e))?;
        self.control.validate().map_err(|e| invalid(&e))?;
        self.session.validate().map_err(|e| invalid(&e))?;
        Ok(self)
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
