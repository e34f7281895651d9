//! Core of the careledger node.
//!
//! The pieces stack bottom-up:
//!
//! - [`crypto`]: hashing, AES-256-GCM sealing, Ed25519 signatures and
//!   X25519 key wrapping for per-file keys.
//! - [`castore`]: a directory-backed store where every blob lives under the
//!   SHA-256 of its bytes.
//! - [`ledger`]: signed transactions batched into hash-linked blocks, with
//!   verification and replay.
//! - [`contract`]: the deterministic state machine folded over the ledger:
//!   registry, file records, grants and dose requests.
//! - [`careflow`]: the workflows users actually run (upload, fetch, share,
//!   motion ingestion, dose suggestion, prescriptions, emergencies).
//! - [`node`]: persistence and the single-writer appender tying it together.

pub mod canonical;
pub mod careflow;
pub mod castore;
pub mod contract;
pub mod crypto;
pub mod ledger;
pub mod node;

mod hexser;

pub use castore::{BlobStore, ContentHash};
pub use contract::{ContractState, Role};
pub use crypto::{Digest, KeyPair};
pub use ledger::{Block, Transaction, TxPayload};
pub use node::Node;
