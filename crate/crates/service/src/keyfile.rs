//! Keyfiles: the canonical JSON form of a [`KeyPair`], readable by the owner only.

use std::fs;
use std::io::Write;
use std::path::Path;

use careledger_core::canonical;
use careledger_core::crypto::KeyPair;

#[derive(Debug, thiserror::Error)]
pub enum KeyfileError {
    #[error("keyfile {0} already exists")]
    Exists(String),
    #[error("keyfile {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("keyfile {path} is malformed: {reason}")]
    Malformed { path: String, reason: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> KeyfileError + '_ {
    move |source| KeyfileError::Io { path: path.display().to_string(), source }
}

/// Writes `keys` to a new file with mode 0600. Never overwrites.
pub fn write(path: &Path, keys: &KeyPair) -> Result<(), KeyfileError> {
    if path.exists() {
        return Err(KeyfileError::Exists(path.display().to_string()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io(path))?;
    }
    let text = canonical::to_string(keys).map_err(|e| KeyfileError::Malformed { path: path.display().to_string(), reason: e.to_string() })?;
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create_new(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path).map_err(io(path))?;
    f.write_all(text.as_bytes()).map_err(io(path))?;
    f.sync_all().map_err(io(path))
}

pub fn read(path: &Path) -> Result<KeyPair, KeyfileError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    let malformed = |reason: String| KeyfileError::Malformed { path: path.display().to_string(), reason };
    let keys: KeyPair = serde_json::from_str(text.trim_end()).map_err(|e| malformed(e.to_string()))?;
    if !keys.is_consistent() {
        return Err(malformed("public keys do not match the private keys".into()));
    }
    Ok(keys)
}
