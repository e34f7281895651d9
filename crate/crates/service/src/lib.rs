//! The careledger node as an HTTP service.
//!
//! [`boot`] opens (or initialises) the data directory, [`serve`] runs the
//! `/v1` API until shut down. Sessions come from a challenge–response login
//! in which the client proves possession of its signing key.

pub mod api;
pub mod config;
pub mod error;
pub mod keyfile;
pub mod server;
pub mod session;

pub use api::{router, AppState};
pub use config::{NodeConfig, Overrides};
pub use error::ApiError;
pub use server::{boot, serve, Booted, ServiceError};
