//! Startup, the background sealer and graceful shutdown.

use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use tokio::net::TcpListener;

use careledger_core::careflow::Careflow;
use careledger_core::node::{NodeError, CHAIN_FILE};
use careledger_core::Node;

use crate::api::{router, AppState};
use crate::config::NodeConfig;
use crate::keyfile::{self, KeyfileError};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("refusing to start: chain.log is corrupt (first_bad_height={first_bad_height}: {reason})")]
    CorruptChain { first_bad_height: u64, reason: String },
    #[error(transparent)]
    Node(NodeError),
    #[error(transparent)]
    Keyfile(#[from] KeyfileError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl From<NodeError> for ServiceError {
    fn from(e: NodeError) -> Self {
        match e {
            NodeError::CorruptChain { first_bad_height, reason } => ServiceError::CorruptChain { first_bad_height, reason },
            other => ServiceError::Node(other),
        }
    }
}

pub struct Booted {
    pub state: AppState,
    /// Set when this start minted the genesis block.
    pub admin_keyfile: Option<PathBuf>,
}

/// Opens the node in `config.data_dir`, verifying the chain, or mints a
/// genesis block for the configured admin and writes the admin keyfile.
pub fn boot(config: NodeConfig) -> Result<Booted, ServiceError> {
    let chain = config.data_dir.join(CHAIN_FILE);
    let fresh = std::fs::metadata(&chain).map(|m| m.len() == 0).unwrap_or(true);
    let (node, admin_keyfile) = if fresh {
        let path = config.admin_keyfile_path();
        if path.exists() {
            return Err(KeyfileError::Exists(path.display().to_string()).into());
        }
        let (node, admin) = Node::create(&config.data_dir, &config.admin_id, &config.admin_display_name)?;
        keyfile::write(&path, &admin)?;
        (node, Some(path))
    } else {
        (Node::open(&config.data_dir)?, None)
    };
    let flow = Careflow::new(Arc::new(node), config.decision());
    Ok(Booted { state: AppState::new(flow, config), admin_keyfile })
}

/// Serves until `shutdown` resolves, then seals whatever is still pending.
pub async fn serve(listener: TcpListener, state: AppState, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
    let node = state.flow().node().clone();
    let interval = state.config().seal_interval_ms;
    let sealer_node = node.clone();
    let sealer = tokio::spawn(async move {
        let tick = Duration::from_millis((interval / 4).max(10));
        loop {
            tokio::time::sleep(tick).await;
            let n = sealer_node.clone();
            match tokio::task::spawn_blocking(move || n.seal_if_due(interval)).await {
                Ok(Err(e)) => eprintln!("sealer: {e}"),
                Err(e) => eprintln!("sealer task failed: {e}"),
                Ok(Ok(_)) => {}
            }
        }
    });

    let result = axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await;
    sealer.abort();
    tokio::task::spawn_blocking(move || node.flush()).await.map_err(|e| std::io::Error::other(e.to_string()))??;
    result?;
    Ok(())
}
