//! A single ledger node: `chain.log`, the blob store and the appender.
//!
//! All writes serialize through one mutex. Submitted transactions are
//! admitted against a speculative state (committed state plus everything
//! pending), so an invalid transaction is refused at submission and a batch
//! that reaches [`Node::flush`] seals cleanly. Readers take an `Arc` snapshot
//! of the committed state and never block the appender for long.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::castore::{BlobStore, StoreError};
use crate::contract::{ContractState, Role};
use crate::crypto::{generate_keypair, CryptoError, KeyPair};
use crate::ledger::{self, Block, ChainLog, ChainReport, LedgerError, Transaction, TxError, TxId, TxPayload};

pub const CHAIN_FILE: &str = "chain.log";
pub const BLOB_DIR: &str = "blobs";

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("chain.log is corrupt at height {first_bad_height}: {reason}")]
    CorruptChain { first_bad_height: u64, reason: String },
    #[error("no chain at {0}; initialise the node first")]
    NoChain(PathBuf),
    #[error("a chain already exists at {0}")]
    ChainExists(PathBuf),
    #[error(transparent)]
    Rejected(#[from] TxError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Where a committed transaction landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receipt {
    pub tx_id: TxId,
    pub height: u64,
}

struct Appender {
    blocks: Vec<Block>,
    log: ChainLog,
    pending: Vec<Transaction>,
    pending_state: ContractState,
    last_seal_ms: u64,
}

pub struct Node {
    data_dir: PathBuf,
    store: BlobStore,
    committed: RwLock<Arc<ContractState>>,
    appender: Mutex<Appender>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node").field("data_dir", &self.data_dir).finish_non_exhaustive()
    }
}

impl Node {
    /// Creates a fresh node whose genesis block registers `admin_id`.
    /// Returns the admin's key material; it is not stored anywhere.
    pub fn create(data_dir: impl Into<PathBuf>, admin_id: &str, display_name: &str) -> Result<(Node, KeyPair), NodeError> {
        let data_dir = data_dir.into();
        let chain_path = data_dir.join(CHAIN_FILE);
        if chain_path.metadata().map(|m| m.len() > 0).unwrap_or(false) {
            return Err(NodeError::ChainExists(chain_path));
        }
        let admin = generate_keypair(admin_id)?;
        let ts = now_ms();
        let tx = Transaction::signed(
            &admin,
            ts,
            TxPayload::RegisterUser {
                user_id: admin_id.to_string(),
                role: Role::Admin,
                display_name: display_name.to_string(),
                sign_public: admin.sign_public.clone(),
                enc_public: admin.enc_public.clone(),
                bound_patient: None,
            },
        );
        let block = ledger::genesis(tx, ts)?;
        let mut log = ChainLog::open(chain_path)?;
        log.append(&block)?;
        let node = Node::assemble(data_dir, log, vec![block])?;
        Ok((node, admin))
    }

    /// Loads and fully verifies an existing chain.
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Node, NodeError> {
        let data_dir = data_dir.into();
        let chain_path = data_dir.join(CHAIN_FILE);
        let bytes = match std::fs::read(&chain_path) {
            Ok(b) if !b.is_empty() => b,
            Ok(_) => return Err(NodeError::NoChain(chain_path)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(NodeError::NoChain(chain_path)),
            Err(e) => return Err(e.into()),
        };
        let report = ledger::verify_log_bytes(&bytes);
        if !report.valid {
            return Err(NodeError::CorruptChain {
                first_bad_height: report.first_bad_height.unwrap_or(0),
                reason: report.reason.unwrap_or_default(),
            });
        }
        let text = String::from_utf8(bytes).expect("verified as utf-8");
        let blocks = ledger::parse_log(&text).expect("verified as parseable");
        let log = ChainLog::open(chain_path)?;
        Node::assemble(data_dir, log, blocks)
    }

    fn assemble(data_dir: PathBuf, log: ChainLog, blocks: Vec<Block>) -> Result<Node, NodeError> {
        let state = ledger::replay(&blocks)?;
        let store = BlobStore::open(data_dir.join(BLOB_DIR))?;
        Ok(Node {
            data_dir,
            store,
            committed: RwLock::new(Arc::new(state.clone())),
            appender: Mutex::new(Appender { blocks, log, pending: Vec::new(), pending_state: state, last_seal_ms: now_ms() }),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn chain_path(&self) -> PathBuf {
        self.data_dir.join(CHAIN_FILE)
    }

    pub fn store(&self) -> &BlobStore {
        &self.store
    }

    /// Snapshot of the committed contract state.
    pub fn state(&self) -> Arc<ContractState> {
        self.committed.read().expect("state lock poisoned").clone()
    }

    pub fn blocks(&self) -> Vec<Block> {
        self.lock().blocks.clone()
    }

    pub fn height(&self) -> u64 {
        self.lock().blocks.len() as u64 - 1
    }

    pub fn pending_len(&self) -> usize {
        self.lock().pending.len()
    }

    pub fn verify(&self) -> ChainReport {
        ledger::verify_chain(&self.lock().blocks)
    }

    fn lock(&self) -> MutexGuard<'_, Appender> {
        self.appender.lock().expect("appender lock poisoned")
    }

    /// Admits `tx` into the pending batch without sealing.
    pub fn submit(&self, tx: Transaction) -> Result<TxId, NodeError> {
        let mut app = self.lock();
        let mut next = app.pending_state.clone();
        ledger::admit(&mut next, &tx)?;
        app.pending_state = next;
        let id = tx.tx_id;
        app.pending.push(tx);
        Ok(id)
    }

    /// Seals whatever is pending into one block.
    pub fn flush(&self) -> Result<Option<Block>, NodeError> {
        let mut app = self.lock();
        self.seal_locked(&mut app)
    }

    /// Seals if something is pending and `interval_ms` has passed since the last seal.
    pub fn seal_if_due(&self, interval_ms: u64) -> Result<Option<Block>, NodeError> {
        let mut app = self.lock();
        if app.pending.is_empty() || now_ms().saturating_sub(app.last_seal_ms) < interval_ms {
            return Ok(None);
        }
        self.seal_locked(&mut app)
    }

    fn seal_locked(&self, app: &mut Appender) -> Result<Option<Block>, NodeError> {
        if app.pending.is_empty() {
            return Ok(None);
        }
        let tip = app.blocks.last().expect("chain has genesis");
        let base = self.state();
        let batch = std::mem::take(&mut app.pending);
        let (block, state) = match ledger::seal_block(tip, &base, batch.clone(), now_ms()) {
            Ok(ok) => ok,
            Err(e) => {
                app.pending_state = (*base).clone();
                return Err(e.into());
            }
        };
        if let Err(e) = app.log.append(&block) {
            app.pending = batch;
            return Err(e.into());
        }
        app.blocks.push(block.clone());
        app.last_seal_ms = now_ms();
        *self.committed.write().expect("state lock poisoned") = Arc::new(state);
        Ok(Some(block))
    }

    /// Submits and seals immediately; returns once the block is on disk.
    pub fn commit(&self, tx: Transaction) -> Result<Receipt, NodeError> {
        self.commit_batch(vec![tx]).map(|r| r[0])
    }

    /// Submits several transactions atomically and seals them together.
    /// If any is refused none are kept.
    pub fn commit_batch(&self, txs: Vec<Transaction>) -> Result<Vec<Receipt>, NodeError> {
        let mut app = self.lock();
        let mut next = app.pending_state.clone();
        for tx in &txs {
            ledger::admit(&mut next, tx)?;
        }
        app.pending_state = next;
        let ids: Vec<TxId> = txs.iter().map(|t| t.tx_id).collect();
        app.pending.extend(txs);
        let block = self.seal_locked(&mut app)?.expect("batch is non-empty");
        Ok(ids.into_iter().map(|tx_id| Receipt { tx_id, height: block.height }).collect())
    }
}
