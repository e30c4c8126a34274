use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest as _, Sha256};

use super::message::{Digest, Proposal};
use crate::field::bytes;
use crate::netsim::NodeId;

/// Requests ordered by (sender, bytes), without duplicates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    requests: Vec<(NodeId, Vec<u8>)>,
}

impl Batch {
    pub fn new(requests: impl IntoIterator<Item = (NodeId, Vec<u8>)>) -> Self {
        let set: BTreeSet<(NodeId, Vec<u8>)> = requests.into_iter().collect();
        Batch {
            requests: set.into_iter().collect(),
        }
    }

    pub fn requests(&self) -> &[(NodeId, Vec<u8>)] {
        &self.requests
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        bytes::put_u32(&mut out, self.requests.len() as u32);
        for (sender, req) in &self.requests {
            bytes::put_u32(&mut out, *sender);
            bytes::put_bytes(&mut out, req);
        }
        out
    }

    pub fn digest(&self) -> Digest {
        Sha256::digest(self.to_bytes()).into()
    }
}

/// Keeps every request that appears in strictly more than f of the given
/// proposals.
pub fn aggregate<'a>(proposals: impl IntoIterator<Item = &'a Proposal>, f: usize) -> Batch {
    let mut counts: BTreeMap<(NodeId, &[u8]), usize> = BTreeMap::new();
    for prop in proposals {
        let distinct: BTreeSet<(NodeId, &[u8])> = prop.iter().map(|(s, r)| (*s, r.as_slice())).collect();
        for key in distinct {
            *counts.entry(key).or_default() += 1;
        }
    }
    Batch::new(
        counts
            .into_iter()
            .filter(|&(_, c)| c > f)
            .map(|((s, r), _)| (s, r.to_vec())),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(items: &[(NodeId, &str)]) -> Proposal {
        items.iter().map(|(s, r)| (*s, r.as_bytes().to_vec())).collect()
    }

    #[test]
    fn request_in_two_of_three_is_kept() {
        let props = [p(&[(0, "r"), (1, "x")]), p(&[(0, "r")]), p(&[(2, "y")])];
        let b = aggregate(&props, 1);
        assert_eq!(b.requests(), &[(0, b"r".to_vec())]);
    }

    #[test]
    fn request_in_one_proposal_is_dropped() {
        let props = [p(&[(0, "r")]), p(&[]), p(&[])];
        assert!(aggregate(&props, 1).is_empty());
    }

    #[test]
    fn identical_proposals_pass_through_sorted() {
        let one = p(&[(2, "b"), (0, "z"), (2, "a")]);
        let props = [one.clone(), one.clone(), one];
        let b = aggregate(&props, 1);
        assert_eq!(
            b.requests(),
            &[(0, b"z".to_vec()), (2, b"a".to_vec()), (2, b"b".to_vec())]
        );
    }

    #[test]
    fn repeated_entry_inside_one_proposal_counts_once() {
        let props = [p(&[(0, "r"), (0, "r")]), p(&[])];
        assert!(aggregate(&props, 1).is_empty());
    }

    #[test]
    fn digest_depends_on_content_only() {
        let a = Batch::new(vec![(1, b"x".to_vec()), (0, b"y".to_vec())]);
        let b = Batch::new(vec![(0, b"y".to_vec()), (1, b"x".to_vec()), (1, b"x".to_vec())]);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), Batch::default().digest());
    }
}
