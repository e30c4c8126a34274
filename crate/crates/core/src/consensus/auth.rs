//! Per-sender HMAC-SHA256 tags. The simulator hands each node only its own
//! signing key; verification keys are shared, which is enough inside a
//! closed simulation where no node can read another's state.

use std::sync::Arc;

use hmac::{Hmac, Mac};
use sha2::{Digest as _, Sha256};

use super::message::{signed_bytes, ConsensusMessage, Payload, TAG_LEN};
use crate::netsim::NodeId;

type HmacSha256 = Hmac<Sha256>;

#[derive(Clone, Debug)]
pub struct Keyring {
    keys: Arc<Vec<[u8; 32]>>,
}

impl Keyring {
    /// Derives n keys deterministically from a seed.
    pub fn generate(n: usize, seed: u64) -> Self {
        let keys = (0..n as u32)
            .map(|i| {
                let mut h = Sha256::new();
                h.update(b"replica-key");
                h.update(seed.to_be_bytes());
                h.update(i.to_be_bytes());
                h.finalize().into()
            })
            .collect();
        Keyring { keys: Arc::new(keys) }
    }

    pub fn signer(&self, id: NodeId) -> Signer {
        Signer {
            id,
            key: self.keys[id as usize],
        }
    }

    pub fn verifier(&self) -> Verifier {
        Verifier {
            keys: Arc::clone(&self.keys),
        }
    }
}

fn tag(key: &[u8; 32], data: &[u8]) -> [u8; TAG_LEN] {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

#[derive(Clone, Debug)]
pub struct Signer {
    id: NodeId,
    key: [u8; 32],
}

impl Signer {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn sign(&self, view: u64, seq: u64, payload: Payload) -> ConsensusMessage {
        let t = tag(&self.key, &signed_bytes(view, seq, self.id, &payload));
        ConsensusMessage {
            view,
            seq,
            sender: self.id,
            payload,
            tag: t,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Verifier {
    keys: Arc<Vec<[u8; 32]>>,
}

impl Verifier {
    pub fn n(&self) -> usize {
        self.keys.len()
    }

    pub fn verify(&self, msg: &ConsensusMessage) -> bool {
        let Some(key) = self.keys.get(msg.sender as usize) else {
            return false;
        };
        let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
        mac.update(&msg.signed_bytes());
        mac.verify_slice(&msg.tag).is_ok()
    }
}
