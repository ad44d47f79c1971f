//! Asynchronous reward scoring: uuid-tagged submissions, a bounded queue
//! drained by scoring workers, and an in-memory result store.

pub mod client;
pub mod protocol;
pub mod service;
pub mod store;

pub use client::{Fetched, InProcessClient, RewardClient, TcpClient};
pub use protocol::{Message, Status};
pub use service::{serve, Registry, Scorer, ServiceConfig, ServiceCore, ServiceHandle, ShutdownTrigger};
pub use store::ResultStore;
