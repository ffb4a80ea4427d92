//! Rank-addressed message passing with deterministic collectives.
//!
//! Two interchangeable backends implement [`Endpoint`]: in-process channels
//! ([`inprocess_world`]) and TCP sockets ([`TcpEndpoint`]). Delivery is FIFO
//! per `(source, destination, tag)`; a `recv` only matches its own source and
//! tag. Collectives in [`collective`] are built on top of `send`/`recv`.

pub mod collective;
mod inprocess;
mod mailbox;
mod tcp;
pub mod wire;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use collective::{allreduce, broadcast, reduce_to_root, CommGroup};
pub use inprocess::{inprocess_world, LocalEndpoint};
pub use tcp::TcpEndpoint;

pub type RankId = usize;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Worker,
    Communicator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rank {
    pub id: RankId,
    pub role: Role,
}

/// A received message. Control messages carry an empty payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub tag: u32,
    pub source: RankId,
    pub payload: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("unknown rank {rank} in world of {world}")]
    UnknownRank { rank: RankId, world: usize },

    #[error("rank {rank} is not a member of the group")]
    NotAMember { rank: RankId },

    #[error("connection to rank {peer} is closed")]
    Closed { peer: RankId },

    #[error("timed out after {after:?} waiting for rank {peer} (tag {tag})")]
    Timeout { peer: RankId, tag: u32, after: Duration },

    #[error("rank {member} contributed {got} elements, expected {expected}")]
    LengthMismatch {
        member: RankId,
        expected: usize,
        got: usize,
    },

    #[error("invalid group: {0}")]
    InvalidGroup(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One rank's view of the communication fabric. An endpoint is used by its
/// owning rank only; the fabric beneath it is shared.
pub trait Endpoint: Send + Sync {
    fn rank(&self) -> RankId;

    fn world_size(&self) -> usize;

    /// Default wait limit for [`Endpoint::recv`].
    fn timeout(&self) -> Duration;

    fn send(&self, to: RankId, tag: u32, payload: &[f64]) -> Result<(), TransportError>;

    fn recv_timeout(&self, from: RankId, tag: u32, timeout: Duration) -> Result<Message, TransportError>;

    fn recv(&self, from: RankId, tag: u32) -> Result<Message, TransportError> {
        self.recv_timeout(from, tag, self.timeout())
    }
}

pub(crate) fn check_rank(rank: RankId, world: usize) -> Result<(), TransportError> {
    if rank < world {
        Ok(())
    } else {
        Err(TransportError::UnknownRank { rank, world })
    }
}
