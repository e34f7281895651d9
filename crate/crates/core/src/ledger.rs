//! Append-only, hash-linked block log.
//!
//! Each block commits to its predecessor through
//! `SHA-256(LE64(height) ‖ prev_hash ‖ LE64(timestamp_ms) ‖ SHA-256(canonical transactions))`.
//! Transactions are signed by their author over the canonical JSON of
//! `{author, payload, timestamp_ms}`; the transaction id is the SHA-256 of
//! those same bytes.
//!
//! The persisted form (`chain.log`) is one canonical-JSON block per line.
//! Loading insists every line is byte-for-byte canonical, so any edit to the
//! file either changes a hashed value or breaks the canonical form.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::canonical;
use crate::castore::ContentHash;
use crate::contract::{ContractError, ContractState, Decision, FileKind, Role};
use crate::crypto::{self, Digest, EncPublicKey, KeyPair, SignPublicKey, Signature, WrappedKey};

pub type TxId = Digest;
pub type UserId = String;

/// Contract operations. Every variant carries ids, hashes and keys only;
/// medical content stays encrypted in the blob store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TxPayload {
    /// Unsigned: the requester has no keys until approval.
    RequestRegistration {
        user_id: UserId,
        role: Role,
        display_name: String,
        bound_patient: Option<UserId>,
    },
    RegisterUser {
        user_id: UserId,
        role: Role,
        display_name: String,
        sign_public: SignPublicKey,
        enc_public: EncPublicKey,
        bound_patient: Option<UserId>,
    },
    StoreFileHash {
        content_hash: ContentHash,
        plaintext_hash: Digest,
        kind: FileKind,
        owner_patient: UserId,
        wrapped_keys: Vec<WrappedKey>,
    },
    GrantAccess {
        content_hash: ContentHash,
        grantee: UserId,
        wrapped_key: WrappedKey,
    },
    RevokeAccess {
        content_hash: ContentHash,
        grantee: UserId,
    },
    SubmitDoseRequest {
        patient: UserId,
        request_file: ContentHash,
    },
    RecordPrescription {
        patient: UserId,
        request: TxId,
        dose_mg: u64,
        prescription_file: ContentHash,
        decision: Decision,
    },
    EmergencyDoseRequest {
        patient: UserId,
        request_file: ContentHash,
    },
    EmergencyDecision {
        request_tx: TxId,
        nurse: UserId,
        approved: bool,
        dose_mg: u64,
    },
}

impl TxPayload {
    pub fn name(&self) -> &'static str {
        match self {
            TxPayload::RequestRegistration { .. } => "request_registration",
            TxPayload::RegisterUser { .. } => "register_user",
            TxPayload::StoreFileHash { .. } => "store_file_hash",
            TxPayload::GrantAccess { .. } => "grant_access",
            TxPayload::RevokeAccess { .. } => "revoke_access",
            TxPayload::SubmitDoseRequest { .. } => "submit_dose_request",
            TxPayload::RecordPrescription { .. } => "record_prescription",
            TxPayload::EmergencyDoseRequest { .. } => "emergency_dose_request",
            TxPayload::EmergencyDecision { .. } => "emergency_decision",
        }
    }
}

#[derive(Serialize)]
struct SigningForm<'a> {
    author: &'a str,
    payload: &'a TxPayload,
    timestamp_ms: u64,
}

fn signing_bytes(author: &str, timestamp_ms: u64, payload: &TxPayload) -> Vec<u8> {
    canonical::to_vec(&SigningForm { author, payload, timestamp_ms }).expect("payload serializes")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transaction {
    pub tx_id: TxId,
    pub author: UserId,
    pub timestamp_ms: u64,
    pub payload: TxPayload,
    pub signature: Signature,
}

impl Transaction {
    pub fn signed(keys: &KeyPair, timestamp_ms: u64, payload: TxPayload) -> Transaction {
        let bytes = signing_bytes(&keys.user_id, timestamp_ms, &payload);
        Transaction {
            tx_id: crypto::content_hash(&bytes),
            author: keys.user_id.clone(),
            timestamp_ms,
            signature: keys.sign(&bytes),
            payload,
        }
    }

    /// A registration request, which carries an empty signature.
    pub fn registration_request(timestamp_ms: u64, user_id: &str, role: Role, display_name: &str, bound_patient: Option<&str>) -> Transaction {
        let payload = TxPayload::RequestRegistration {
            user_id: user_id.to_string(),
            role,
            display_name: display_name.to_string(),
            bound_patient: bound_patient.map(str::to_string),
        };
        let bytes = signing_bytes(user_id, timestamp_ms, &payload);
        Transaction {
            tx_id: crypto::content_hash(&bytes),
            author: user_id.to_string(),
            timestamp_ms,
            payload,
            signature: Signature(Vec::new()),
        }
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        signing_bytes(&self.author, self.timestamp_ms, &self.payload)
    }

    pub fn computed_id(&self) -> TxId {
        crypto::content_hash(&self.signing_bytes())
    }

    fn is_genesis_registration(&self) -> bool {
        matches!(&self.payload, TxPayload::RegisterUser { user_id, role: Role::Admin, .. } if *user_id == self.author)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TxError {
    #[error("tx id does not match its signing form")]
    IdMismatch,
    #[error("author {0} has no registered signing key")]
    UnknownSigner(UserId),
    #[error("signature does not verify")]
    BadSignature,
    #[error("registration requests must be unsigned and authored by the requester")]
    MalformedRequest,
    #[error(transparent)]
    Contract(#[from] ContractError),
}

/// Checks id, signature and contract validity of `tx` against `state`, and applies it.
/// On error `state` is unchanged.
pub fn admit(state: &mut ContractState, tx: &Transaction) -> Result<(), TxError> {
    if tx.computed_id() != tx.tx_id {
        return Err(TxError::IdMismatch);
    }
    match &tx.payload {
        TxPayload::RequestRegistration { user_id, .. } => {
            if !tx.signature.0.is_empty() || *user_id != tx.author {
                return Err(TxError::MalformedRequest);
            }
        }
        TxPayload::RegisterUser { sign_public, .. } if state.users.is_empty() && tx.is_genesis_registration() => {
            // Bootstrap: the first admin signs its own registration.
            verify_with(sign_public, tx)?;
        }
        _ => {
            let key = state
                .users
                .get(&tx.author)
                .and_then(|u| u.sign_public.clone())
                .ok_or_else(|| TxError::UnknownSigner(tx.author.clone()))?;
            verify_with(&key, tx)?;
        }
    }
    state.apply(tx)?;
    Ok(())
}

fn verify_with(key: &SignPublicKey, tx: &Transaction) -> Result<(), TxError> {
    match crypto::verify(key, &tx.signing_bytes(), &tx.signature) {
        Ok(true) => Ok(()),
        _ => Err(TxError::BadSignature),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Digest,
    pub timestamp_ms: u64,
    pub transactions: Vec<Transaction>,
    pub block_hash: Digest,
}

impl Block {
    pub fn compute_hash(height: u64, prev_hash: &Digest, timestamp_ms: u64, transactions: &[Transaction]) -> Digest {
        let tx_digest = Sha256::digest(canonical::to_vec(transactions).expect("transactions serialize"));
        let mut h = Sha256::new();
        h.update(height.to_le_bytes());
        h.update(prev_hash.as_bytes());
        h.update(timestamp_ms.to_le_bytes());
        h.update(tx_digest);
        Digest(h.finalize().into())
    }

    fn assemble(height: u64, prev_hash: Digest, timestamp_ms: u64, transactions: Vec<Transaction>) -> Block {
        let block_hash = Block::compute_hash(height, &prev_hash, timestamp_ms, &transactions);
        Block { height, prev_hash, timestamp_ms, transactions, block_hash }
    }

    pub fn hash_is_valid(&self) -> bool {
        Block::compute_hash(self.height, &self.prev_hash, self.timestamp_ms, &self.transactions) == self.block_hash
    }

    pub fn to_line(&self) -> String {
        canonical::to_string(self).expect("block serializes")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LedgerError {
    #[error("genesis must be a single self-signed admin registration")]
    BadGenesis,
    #[error("nothing to seal")]
    EmptyBatch,
    #[error("transaction {tx_id} rejected: {source}")]
    Rejected {
        tx_id: TxId,
        #[source]
        source: TxError,
    },
    #[error("chain invalid at height {height}: {reason}")]
    InvalidChain { height: u64, reason: String },
}

/// Mints block 0 from the admin's self-registration.
pub fn genesis(admin_registration: Transaction, timestamp_ms: u64) -> Result<Block, LedgerError> {
    if !admin_registration.is_genesis_registration() {
        return Err(LedgerError::BadGenesis);
    }
    let mut state = ContractState::default();
    admit(&mut state, &admin_registration).map_err(|_| LedgerError::BadGenesis)?;
    Ok(Block::assemble(0, Digest::ZERO, timestamp_ms, vec![admin_registration]))
}

/// Seals `pending` on top of `tip`, all or nothing.
///
/// `state` must be the state at `tip`. Returns the block and the state after it.
pub fn seal_block(tip: &Block, state: &ContractState, pending: Vec<Transaction>, timestamp_ms: u64) -> Result<(Block, ContractState), LedgerError> {
    if pending.is_empty() {
        return Err(LedgerError::EmptyBatch);
    }
    let mut next = state.clone();
    for tx in &pending {
        admit(&mut next, tx).map_err(|source| LedgerError::Rejected { tx_id: tx.tx_id, source })?;
    }
    let timestamp_ms = timestamp_ms.max(tip.timestamp_ms);
    Ok((Block::assemble(tip.height + 1, tip.block_hash, timestamp_ms, pending), next))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainReport {
    pub valid: bool,
    pub first_bad_height: Option<u64>,
    pub height: u64,
    pub reason: Option<String>,
}

impl ChainReport {
    fn ok(blocks: usize) -> ChainReport {
        ChainReport { valid: true, first_bad_height: None, height: blocks.saturating_sub(1) as u64, reason: None }
    }

    fn bad(height: u64, reason: impl Into<String>) -> ChainReport {
        ChainReport { valid: false, first_bad_height: Some(height), height, reason: Some(reason.into()) }
    }
}

fn check_and_fold(blocks: &[Block]) -> Result<ContractState, (u64, String)> {
    if blocks.is_empty() {
        return Err((0, "empty chain".into()));
    }
    let mut state = ContractState::default();
    let mut prev: Option<&Block> = None;
    for (i, block) in blocks.iter().enumerate() {
        let at = i as u64;
        if block.height != at {
            return Err((at, format!("height {} at position {at}", block.height)));
        }
        match prev {
            None => {
                if block.prev_hash != Digest::ZERO || block.transactions.len() != 1 || !block.transactions[0].is_genesis_registration() {
                    return Err((at, "malformed genesis".into()));
                }
            }
            Some(p) => {
                if block.prev_hash != p.block_hash {
                    return Err((at, "prev_hash does not link to predecessor".into()));
                }
                if block.timestamp_ms < p.timestamp_ms {
                    return Err((at, "timestamp went backwards".into()));
                }
                if block.transactions.is_empty() {
                    return Err((at, "empty block".into()));
                }
            }
        }
        if !block.hash_is_valid() {
            return Err((at, "block hash mismatch".into()));
        }
        for tx in &block.transactions {
            admit(&mut state, tx).map_err(|e| (at, format!("tx {}: {e}", tx.tx_id)))?;
        }
        prev = Some(block);
    }
    Ok(state)
}

/// Recomputes every hash and link and re-admits every transaction against
/// the replayed registry.
pub fn verify_chain(blocks: &[Block]) -> ChainReport {
    match check_and_fold(blocks) {
        Ok(_) => ChainReport::ok(blocks.len()),
        Err((height, reason)) => ChainReport::bad(height, reason),
    }
}

/// Left fold of the contract over every transaction, after full verification.
pub fn replay(blocks: &[Block]) -> Result<ContractState, LedgerError> {
    check_and_fold(blocks).map_err(|(height, reason)| LedgerError::InvalidChain { height, reason })
}

/// Parses one persisted line. Non-canonical text is rejected.
pub fn parse_line(line: &str) -> Result<Block, String> {
    let block: Block = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if block.to_line() != line {
        return Err("line is not in canonical form".into());
    }
    Ok(block)
}

/// Parses a whole `chain.log`. On failure returns the line (= height) that
/// could not be read.
pub fn parse_log(text: &str) -> Result<Vec<Block>, (u64, String)> {
    let body = match text.strip_suffix('\n') {
        Some(b) => b,
        None if text.is_empty() => return Ok(Vec::new()),
        None => text,
    };
    let lines: Vec<&str> = body.split('\n').collect();
    let mut blocks = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        blocks.push(parse_line(line).map_err(|e| (i as u64, e))?);
    }
    if !text.ends_with('\n') {
        return Err((blocks.len().saturating_sub(1) as u64, "log does not end with a newline".into()));
    }
    Ok(blocks)
}

/// Verifies raw persisted bytes, including ones that no longer parse.
pub fn verify_log_bytes(bytes: &[u8]) -> ChainReport {
    let text = match std::str::from_utf8(bytes) {
        Ok(t) => t,
        Err(e) => {
            let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() as u64;
            return ChainReport::bad(line, "invalid utf-8");
        }
    };
    match parse_log(text) {
        Ok(blocks) => verify_chain(&blocks),
        Err((height, reason)) => ChainReport::bad(height, reason),
    }
}

/// The `chain.log` file. Appends only.
#[derive(Debug)]
pub struct ChainLog {
    path: PathBuf,
    file: File,
}

impl ChainLog {
    pub fn open(path: impl Into<PathBuf>) -> io::Result<ChainLog> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(ChainLog { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, block: &Block) -> io::Result<()> {
        let mut line = block.to_line();
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()
    }

    pub fn read_bytes(&self) -> io::Result<Vec<u8>> {
        fs::read(&self.path)
    }
}
