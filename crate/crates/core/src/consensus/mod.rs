//! Pre-propose PBFT: every replica proposes the requests it has seen for a
//! slot, and the primary orders the aggregate of 2f+1 proposals instead of a
//! batch of its own choosing.

mod auth;
mod batch;
mod byzantine;
pub mod cluster;
mod message;
mod replica;

pub use auth::{Keyring, Signer, Verifier};
pub use batch::{aggregate, Batch};
pub use byzantine::{Equivocator, InconsistentDealer};
pub use message::{Certificate, ConsensusMessage, Digest, Kind, Payload, Proposal, TAG_LEN};
pub use replica::{Execution, Output, Replica, ReplicaConfig, ReplicaStats};

use thiserror::Error;

use crate::netsim::{NodeId, SimError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConsensusError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub fn primary(view: u64, n: usize) -> NodeId {
    (view % n as u64) as NodeId
}

pub fn quorum(f: usize) -> usize {
    2 * f + 1
}

/// Smallest possible overlap of two quorums of size 2f+1 among n replicas.
pub fn min_quorum_overlap(n: usize, f: usize) -> usize {
    (2 * quorum(f)).saturating_sub(n)
}
