//! Content-addressed blob store.
//!
//! A blob lives at `<root>/<first 2 hex chars>/<remaining 62 chars>` of its
//! SHA-256. Writes go to a temp file in the same shard directory and are
//! renamed into place, so readers never observe a partial blob and racing
//! puts of the same bytes converge on one file.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crypto::{self, CryptoError, Digest};

/// Address of a stored blob: the SHA-256 of its exact bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContentHash(pub Digest);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> ContentHash {
        ContentHash(crypto::content_hash(bytes))
    }

    pub fn digest(&self) -> &Digest {
        &self.0
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.0)
    }
}

impl FromStr for ContentHash {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(ContentHash)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("empty blob rejected")]
    EmptyBlob,
    #[error("blob {0} not found")]
    NotFound(ContentHash),
    #[error("blob {address} is corrupt: bytes hash to {actual}")]
    CorruptBlob { address: ContentHash, actual: ContentHash },
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
}

/// One entry of an fsck report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FsckProblem {
    /// The file's bytes no longer hash to the address its path encodes.
    Mismatch { address: ContentHash, actual: ContentHash },
    /// A file whose path is not a valid address.
    Stray(PathBuf),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FsckReport {
    pub checked: usize,
    pub problems: Vec<FsckProblem>,
}

impl FsckReport {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<BlobStore, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(BlobStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path of the file backing `hash`, whether or not it exists.
    pub fn blob_path(&self, hash: &ContentHash) -> PathBuf {
        let hex = hash.to_string();
        self.root.join(&hex[..2]).join(&hex[2..])
    }

    pub fn put(&self, blob: &[u8]) -> Result<ContentHash, StoreError> {
        if blob.is_empty() {
            return Err(StoreError::EmptyBlob);
        }
        let hash = ContentHash::of(blob);
        let path = self.blob_path(&hash);
        if path.exists() {
            return Ok(hash);
        }
        let shard = path.parent().expect("blob path has a shard directory");
        fs::create_dir_all(shard)?;

        let suffix: [u8; 8] = crypto::random_bytes().map_err(|e| io::Error::new(io::ErrorKind::Other, e))?;
        let tmp = shard.join(format!(".tmp-{}", hex::encode(suffix)));
        let result = (|| {
            let mut file = fs::File::create(&tmp)?;
            file.write_all(blob)?;
            file.sync_all()?;
            fs::rename(&tmp, &path)
        })();
        if let Err(e) = result {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        Ok(hash)
    }

    /// Reads a blob and re-verifies its address before returning it.
    pub fn get(&self, hash: &ContentHash) -> Result<Vec<u8>, StoreError> {
        let bytes = self.get_unverified(hash)?;
        let actual = ContentHash::of(&bytes);
        if actual != *hash {
            return Err(StoreError::CorruptBlob { address: *hash, actual });
        }
        Ok(bytes)
    }

    /// Reads a blob without checking it. Integrity checks that want to report
    /// on tampered bytes (rather than refuse them) start here.
    pub fn get_unverified(&self, hash: &ContentHash) -> Result<Vec<u8>, StoreError> {
        match fs::read(self.blob_path(hash)) {
            Ok(bytes) => Ok(bytes),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(*hash)),
            Err(e) => Err(e.into()),
        }
    }

    /// Existence only. A present-but-corrupt blob still reports `true`;
    /// the corruption surfaces as `CorruptBlob` on `get`.
    pub fn has(&self, hash: &ContentHash) -> bool {
        self.blob_path(hash).is_file()
    }

    /// Number of stored blobs.
    pub fn len(&self) -> Result<usize, StoreError> {
        Ok(self.blob_files()?.len())
    }

    pub fn is_empty(&self) -> Result<bool, StoreError> {
        self.len().map(|n| n == 0)
    }

    /// Re-hashes every blob and reports any whose bytes disagree with its path.
    pub fn fsck(&self) -> Result<FsckReport, StoreError> {
        let mut report = FsckReport::default();
        for path in self.blob_files()? {
            let Some(address) = address_of(&path) else {
                report.problems.push(FsckProblem::Stray(path));
                continue;
            };
            let actual = ContentHash::of(&fs::read(&path)?);
            report.checked += 1;
            if actual != address {
                report.problems.push(FsckProblem::Mismatch { address, actual });
            }
        }
        Ok(report)
    }

    fn blob_files(&self) -> Result<Vec<PathBuf>, StoreError> {
        let mut out = Vec::new();
        for shard in fs::read_dir(&self.root)? {
            let shard = shard?;
            if !shard.file_type()?.is_dir() {
                out.push(shard.path());
                continue;
            }
            for entry in fs::read_dir(shard.path())? {
                let entry = entry?;
                if entry.file_name().to_string_lossy().starts_with(".tmp-") {
                    continue;
                }
                out.push(entry.path());
            }
        }
        out.sort();
        Ok(out)
    }
}

fn address_of(path: &Path) -> Option<ContentHash> {
    let name = path.file_name()?.to_str()?;
    let shard = path.parent()?.file_name()?.to_str()?;
    if shard.len() != 2 || name.len() != 62 {
        return None;
    }
    format!("{shard}{name}").parse().ok()
}
