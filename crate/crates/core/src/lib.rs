//! Verifiable secret sharing gated by a pre-propose PBFT variant, a
//! deterministic partial-synchrony simulator, and the share-delay poisoning
//! attack that motivates the consensus gate.

pub mod attack;
pub mod consensus;
pub mod dpml;
pub mod field;
pub mod netsim;
pub mod vss;
