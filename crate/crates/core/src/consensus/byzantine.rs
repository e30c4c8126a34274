//! Output rewriters that turn an honest replica into a Byzantine one. Each
//! wraps the replica's outputs, so the faulty node still follows the protocol
//! everywhere it is not deliberately lying.

use std::collections::BTreeMap;

use sha2::{Digest as _, Sha256};

use super::auth::Signer;
use super::batch::aggregate;
use super::message::{ConsensusMessage, Digest, Payload};
use super::replica::Output;
use crate::netsim::{Dest, NodeId, WireMessage};

/// A primary that sends one PRE-PREPARE to even replicas and a conflicting
/// one to odd replicas, then votes for both digests.
pub struct Equivocator {
    signer: Signer,
    n: usize,
    f: usize,
    seen: BTreeMap<u64, BTreeMap<NodeId, ConsensusMessage>>,
    alternatives: BTreeMap<(u64, u64), Digest>,
}

impl Equivocator {
    pub fn new(signer: Signer, n: usize, f: usize) -> Self {
        Equivocator {
            signer,
            n,
            f,
            seen: BTreeMap::new(),
            alternatives: BTreeMap::new(),
        }
    }

    /// Remembers every PRE-PROPOSE delivered to this node.
    pub fn observe(&mut self, msg: &ConsensusMessage) {
        if let Payload::PrePropose(_) = msg.payload {
            self.seen.entry(msg.seq).or_default().insert(msg.sender, msg.clone());
        }
    }

    pub fn rewrite(&mut self, outputs: Vec<Output>) -> Vec<Output> {
        let mut out = Vec::with_capacity(outputs.len());
        for o in outputs {
            match o {
                Output::Send { to: Dest::All, msg } if msg.sender == self.signer.id() => match &msg.payload {
                    Payload::PrePrepare { .. } => {
                        let alt = self.alternative(&msg);
                        let alt_digest = *alt.payload.digest().expect("pre-prepare");
                        self.alternatives.insert((msg.view, msg.seq), alt_digest);
                        out.push(Output::Note {
                            kind: "equivocate",
                            detail: format!("{} vs {}", msg.summary(), alt.summary()),
                        });
                        for id in 0..self.n as NodeId {
                            let m = if id % 2 == 0 { msg.clone() } else { alt.clone() };
                            out.push(Output::Send {
                                to: Dest::To(id),
                                msg: m,
                            });
                        }
                    }
                    Payload::Prepare(_) | Payload::Commit(_) => {
                        if let Some(alt) = self.alternatives.get(&(msg.view, msg.seq)) {
                            let payload = match msg.payload {
                                Payload::Prepare(_) => Payload::Prepare(*alt),
                                _ => Payload::Commit(*alt),
                            };
                            let extra = self.signer.sign(msg.view, msg.seq, payload);
                            out.push(Output::Send {
                                to: Dest::All,
                                msg: extra,
                            });
                        }
                        out.push(Output::Send { to: Dest::All, msg });
                    }
                    _ => out.push(Output::Send { to: Dest::All, msg }),
                },
                other => out.push(other),
            }
        }
        out
    }

    /// A second PRE-PREPARE for the same slot. Prefers a different valid
    /// subset of the received proposals; falls back to one whose digest does
    /// not match its proposals, which honest replicas reject.
    fn alternative(&self, original: &ConsensusMessage) -> ConsensusMessage {
        let Payload::PrePrepare { digest, proposals } = &original.payload else {
            unreachable!()
        };
        let (view, seq) = (original.view, original.seq);
        let mut pool: BTreeMap<NodeId, ConsensusMessage> = proposals.iter().map(|p| (p.sender, p.clone())).collect();
        if let Some(seen) = self.seen.get(&seq) {
            for (s, p) in seen {
                pool.entry(*s).or_insert_with(|| p.clone());
            }
        }
        // Our own proposal is ours to rewrite.
        let me = self.signer.id();
        pool.insert(me, self.signer.sign(view, seq, Payload::PrePropose(Vec::new())));

        let all: Vec<ConsensusMessage> = pool.into_values().collect();
        let k = 2 * self.f + 1;
        for subset in combinations(all.len(), k) {
            let chosen: Vec<ConsensusMessage> = subset.iter().map(|&i| all[i].clone()).collect();
            let batch = aggregate(
                chosen.iter().map(|m| match &m.payload {
                    Payload::PrePropose(p) => p,
                    _ => unreachable!(),
                }),
                self.f,
            );
            if batch.digest() != *digest {
                return self.signer.sign(
                    view,
                    seq,
                    Payload::PrePrepare {
                        digest: batch.digest(),
                        proposals: chosen,
                    },
                );
            }
        }
        let bogus: Digest = Sha256::digest(digest).into();
        self.signer.sign(
            view,
            seq,
            Payload::PrePrepare {
                digest: bogus,
                proposals: proposals.clone(),
            },
        )
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// A replica that sends each peer a different REQUEST for the same slot.
pub struct InconsistentDealer {
    signer: Signer,
    n: usize,
}

impl InconsistentDealer {
    pub fn new(signer: Signer, n: usize) -> Self {
        InconsistentDealer { signer, n }
    }

    pub fn rewrite(&self, outputs: Vec<Output>) -> Vec<Output> {
        let mut out = Vec::with_capacity(outputs.len());
        for o in outputs {
            match o {
                Output::Send {
                    to: Dest::All,
                    msg:
                        ConsensusMessage {
                            view,
                            seq,
                            sender,
                            payload: Payload::Request(req),
                            ..
                        },
                } if sender == self.signer.id() => {
                    for id in 0..self.n as NodeId {
                        let mut variant = req.clone();
                        variant.extend_from_slice(format!("#{id}").as_bytes());
                        let msg = self.signer.sign(view, seq, Payload::Request(variant));
                        out.push(Output::Send { to: Dest::To(id), msg });
                    }
                }
                other => out.push(other),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_count() {
        assert_eq!(combinations(7, 5).len(), 21);
        assert_eq!(
            combinations(4, 3),
            vec![vec![0, 1, 2], vec![0, 1, 3], vec![0, 2, 3], vec![1, 2, 3]]
        );
        assert_eq!(combinations(2, 3).len(), 0);
    }
}
