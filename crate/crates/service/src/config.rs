//! Service configuration file (TOML). See docs/api.md for the key set.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tlqa_core::gateway::GatewayConfig;
use tlqa_core::pipeline::PipelineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Encoder parameters written by `pretrain`.
    pub params: Option<PathBuf>,
    /// Similarity model written by `train-sim`.
    pub similarity: Option<PathBuf>,
    /// Embedding store written by `build-store`.
    pub store: Option<PathBuf>,
    /// Synonyms (`surface form<TAB>phrase` lines); replaces the built-in list.
    pub synonyms: Option<PathBuf>,
    /// Scripted mock replies (`regex<TAB>reply` lines) for a mock gateway.
    pub mock_script: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// User answered for when a request names none.
    pub default_user: Option<String>,
    pub data: DataPaths,
    pub pipeline: PipelineConfig,
    /// Absent means no model gateway: rules and templates only.
    pub gateway: Option<GatewayConfig>,
    pub server: ServerConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Load a config file; relative data paths are taken relative to it.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text).map_err(|msg| ConfigError::Parse {
            path: path.to_path_buf(),
            msg,
        })?;
        if let Some(base) = path.parent() {
            cfg.data.rebase(base);
        }
        Ok(cfg)
    }
}

impl DataPaths {
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.params,
            &mut self.similarity,
            &mut self.store,
            &mut self.synonyms,
            &mut self.mock_script,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
