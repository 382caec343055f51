//! Node configuration files (TOML).

use std::path::{Path, PathBuf};

use serde::Deserialize;

use cingal::{Certificate, Error, Result};

fn default_host() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    cingal::tsscp::DEFAULT_PORT
}

fn default_listen_timeout() -> u64 {
    30
}

fn default_transport() -> String {
    "tcp".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub node_id: String,
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_port")]
    pub standard_port: u16,
    /// Relative paths resolve against the config file's directory.
    pub data_dir: PathBuf,
    /// Hex certificate of the owner, who holds every right.
    pub owner_certificate: String,
    #[serde(default = "default_listen_timeout")]
    pub listen_timeout_secs: u64,
    /// Only `tcp`; simulated nodes live inside `cingal sim`.
    #[serde(default = "default_transport")]
    pub transport: String,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MalformedDocument(format!("{}: {e}", path.display())))?;
        let mut cfg: FileConfig = toml::from_str(&text)
            .map_err(|e| Error::MalformedDocument(format!("{}: {e}", path.display())))?;
        if cfg.transport != "tcp" {
            return Err(Error::MalformedDocument(format!(
                "unsupported transport {:?}",
                cfg.transport
            )));
        }
        if cfg.data_dir.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data_dir = dir.join(&cfg.data_dir);
            }
        }
        Ok(cfg)
    }

    pub fn owner(&self) -> Result<Certificate> {
        Certificate::from_hex(&self.owner_certificate)
    }
}
