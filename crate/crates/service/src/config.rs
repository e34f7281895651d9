//! Node configuration: a TOML file, optionally named by `CARELEDGER_CONFIG`,
//! with command-line overrides on top.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use careledger_core::careflow::decision::{DecisionConfig, DEFAULT_TAU};

pub const CONFIG_ENV: &str = "CARELEDGER_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeConfig {
    pub listen: String,
    /// Holds `chain.log` and the blob store.
    pub data_dir: PathBuf,
    pub seal_interval_ms: u64,
    pub tau: f64,
    pub max_consecutive_auto: Option<u32>,
    pub session_ttl_ms: u64,
    pub challenge_ttl_ms: u64,
    pub max_upload_bytes: usize,
    /// Admin registered in the genesis block on first start.
    pub admin_id: String,
    pub admin_display_name: String,
    /// Where the admin keyfile is written at genesis. Defaults to `<data_dir>/admin.key`.
    pub admin_keyfile: Option<PathBuf>,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            listen: "127.0.0.1:8420".into(),
            data_dir: PathBuf::from("careledger-data"),
            seal_interval_ms: 500,
            tau: DEFAULT_TAU,
            max_consecutive_auto: None,
            session_ttl_ms: 60 * 60 * 1000,
            challenge_ttl_ms: 60 * 1000,
            max_upload_bytes: 64 * 1024 * 1024,
            admin_id: "admin".into(),
            admin_display_name: "Administrator".into(),
            admin_keyfile: None,
        }
    }
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data_dir: Option<PathBuf>,
    pub listen: Option<String>,
    pub tau: Option<f64>,
}

impl NodeConfig {
    pub fn from_file(path: &Path) -> Result<NodeConfig, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }

    /// Reads `path`, or the file named by `CARELEDGER_CONFIG`, or falls back
    /// to defaults; then applies `overrides` and validates.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<NodeConfig, ConfigError> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let mut config = match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => NodeConfig::from_file(&p)?,
            None => NodeConfig::default(),
        };
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.data_dir {
            self.data_dir = d.clone();
        }
        if let Some(l) = &o.listen {
            self.listen = l.clone();
        }
        if let Some(t) = o.tau {
            self.tau = t;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.seal_interval_ms == 0 || self.session_ttl_ms == 0 || self.challenge_ttl_ms == 0 {
            return bad("intervals and TTLs must be positive".into());
        }
        if self.listen.parse::<SocketAddr>().is_err() {
            return bad(format!("listen address {:?} is not host:port", self.listen));
        }
        if self.admin_id.is_empty() {
            return bad("admin_id is empty".into());
        }
        fs::create_dir_all(&self.data_dir).or_else(|e| bad(format!("data dir {}: {e}", self.data_dir.display())))?;
        Ok(())
    }

    pub fn decision(&self) -> DecisionConfig {
        DecisionConfig { tau: self.tau, max_consecutive_auto: self.max_consecutive_auto }
    }

    pub fn admin_keyfile_path(&self) -> PathBuf {
        self.admin_keyfile.clone().unwrap_or_else(|| self.data_dir.join("admin.key"))
    }
}
