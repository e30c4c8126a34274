use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{max_faults, NodeId, SimError};

/// Scripted misbehaviour a corrupt participant can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    /// Sends nothing at all.
    Silent,
    /// As primary, sends different PRE-PREPAREs to different peers.
    Equivocate,
    /// Withholds its own shares until it has seen the honest ones.
    DelayedShareDealer,
    /// Sends different request bytes (or shares) to different recipients.
    InconsistentDealer,
}

/// What the network adversary may do. Corrupt nodes are limited to f; drops
/// and isolation only apply before GST.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryPolicy {
    n: usize,
    corrupt: BTreeSet<NodeId>,
    /// Probability that a message sent before GST is dropped.
    pub drop_prob: f64,
    /// Probability that any message is delivered twice.
    pub duplicate_prob: f64,
    /// Probability that a message is replaced by `WireMessage::tampered`.
    pub tamper_prob: f64,
    /// Nodes whose traffic (in and out) is dropped before GST.
    pub isolate: BTreeSet<NodeId>,
}

impl AdversaryPolicy {
    pub fn new(n: usize) -> Self {
        AdversaryPolicy {
            n,
            corrupt: BTreeSet::new(),
            drop_prob: 0.0,
            duplicate_prob: 0.0,
            tamper_prob: 0.0,
            isolate: BTreeSet::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn f(&self) -> usize {
        max_faults(self.n)
    }

    pub fn corrupt(&mut self, id: NodeId) -> Result<(), SimError> {
        if id as usize >= self.n {
            return Err(SimError::UnknownNode { id, n: self.n });
        }
        if !self.corrupt.contains(&id) && self.corrupt.len() + 1 > self.f() {
            return Err(SimError::TooManyCorrupt {
                requested: self.corrupt.len() + 1,
                f: self.f(),
                n: self.n,
            });
        }
        self.corrupt.insert(id);
        Ok(())
    }

    pub fn corrupt_set(&self) -> &BTreeSet<NodeId> {
        &self.corrupt
    }

    pub fn is_honest(&self, id: NodeId) -> bool {
        !self.corrupt.contains(&id)
    }

    pub(crate) fn validate(&self) -> Result<(), SimError> {
        for (name, p) in [
            ("drop_prob", self.drop_prob),
            ("duplicate_prob", self.duplicate_prob),
            ("tamper_prob", self.tamper_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if let Some(&id) = self.isolate.iter().find(|&&id| id as usize >= self.n) {
            return Err(SimError::UnknownNode { id, n: self.n });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupting_more_than_f_is_rejected() {
        let mut a = AdversaryPolicy::new(4);
        a.corrupt(0).unwrap();
        a.corrupt(0).unwrap();
        assert_eq!(
            a.corrupt(1),
            Err(SimError::TooManyCorrupt {
                requested: 2,
                f: 1,
                n: 4
            })
        );
        let mut b = AdversaryPolicy::new(7);
        b.corrupt(5).unwrap();
        b.corrupt(6).unwrap();
        assert!(b.corrupt(1).is_err());
        assert!(b.corrupt(9).is_err());
    }

    #[test]
    fn probabilities_are_checked() {
        let mut a = AdversaryPolicy::new(4);
        a.drop_prob = 1.5;
        assert!(a.validate().is_err());
    }
}
