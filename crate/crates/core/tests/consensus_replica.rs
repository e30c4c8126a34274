//! Single-replica handler checks, driven by hand-built messages.

use sharebft::consensus::{aggregate, ConsensusMessage, Keyring, Output, Payload, Proposal, Replica, ReplicaConfig};
use sharebft::netsim::{Dest, NodeId};

const N: usize = 4;

fn setup(id: NodeId, batch_size: usize) -> (Keyring, Replica) {
    let ring = Keyring::generate(N, 42);
    let mut cfg = ReplicaConfig::new(id, N, 5);
    cfg.batch_size = batch_size;
    let r = Replica::new(cfg, ring.signer(id), ring.verifier()).unwrap();
    (ring, r)
}

fn sends(out: &[Output]) -> Vec<(Dest, &ConsensusMessage)> {
    out.iter()
        .filter_map(|o| match o {
            Output::Send { to, msg } => Some((*to, msg)),
            _ => None,
        })
        .collect()
}

fn request(ring: &Keyring, from: NodeId, view: u64, seq: u64) -> ConsensusMessage {
    ring.signer(from)
        .sign(view, seq, Payload::Request(format!("r{from}").into_bytes()))
}

fn proposal(senders: &[NodeId]) -> Proposal {
    senders.iter().map(|&s| (s, format!("r{s}").into_bytes())).collect()
}

fn pre_propose(ring: &Keyring, from: NodeId, seq: u64, prop: Proposal) -> ConsensusMessage {
    ring.signer(from).sign(0, seq, Payload::PrePropose(prop))
}

fn pre_prepare(ring: &Keyring, seq: u64, proposers: &[NodeId]) -> ConsensusMessage {
    let proposals: Vec<ConsensusMessage> = proposers
        .iter()
        .map(|&p| pre_propose(ring, p, seq, proposal(&[0, 1, 2])))
        .collect();
    let props: Vec<Proposal> = proposals
        .iter()
        .map(|m| match &m.payload {
            Payload::PrePropose(p) => p.clone(),
            _ => unreachable!(),
        })
        .collect();
    let digest = aggregate(&props, 1).digest();
    ring.signer(0).sign(0, seq, Payload::PrePrepare { digest, proposals })
}

#[test]
fn proposes_exactly_when_batch_size_is_reached() {
    let (ring, mut r) = setup(2, 3);
    assert!(sends(&r.handle(request(&ring, 0, 0, 7))).is_empty());
    assert!(sends(&r.handle(request(&ring, 1, 0, 7))).is_empty());
    let out = r.handle(request(&ring, 3, 0, 7));
    let s = sends(&out);
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].0, Dest::To(0));
    assert_eq!(s[0].1.payload, Payload::PrePropose(proposal(&[0, 1, 3])));
    assert!(out.iter().any(|o| matches!(o, Output::SetTimer { .. })));
    // A fourth request does not trigger a second proposal.
    assert!(sends(&r.handle(request(&ring, 2, 0, 7))).is_empty());
}

#[test]
fn primary_issues_on_the_third_proposal_not_the_second() {
    let (ring, mut r) = setup(0, 3);
    for p in [1, 2] {
        assert!(sends(&r.handle(pre_propose(&ring, p, 3, proposal(&[0, 1, 2])))).is_empty());
    }
    let out = r.handle(pre_propose(&ring, 3, 3, proposal(&[1, 2, 3])));
    let s = sends(&out);
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].0, Dest::All);
    let Payload::PrePrepare { digest, proposals } = &s[0].1.payload else {
        panic!("expected a pre-prepare");
    };
    assert_eq!(proposals.len(), 3);
    // r1 and r2 appear in three proposals, r0 in two, r3 in one.
    let expected = aggregate(&[proposal(&[0, 1, 2])], 0);
    assert_eq!(*digest, expected.digest());
    // No second issue for the same slot.
    assert!(sends(&r.handle(pre_propose(&ring, 0, 3, proposal(&[0])))).is_empty());
}

#[test]
fn mismatched_digest_is_rejected_without_a_prepare() {
    let (ring, mut r) = setup(1, 3);
    let good = pre_prepare(&ring, 0, &[0, 1, 2]);
    let Payload::PrePrepare { proposals, .. } = good.payload.clone() else {
        unreachable!()
    };
    let bad = ring.signer(0).sign(
        0,
        0,
        Payload::PrePrepare {
            digest: [3; 32],
            proposals,
        },
    );
    let out = r.handle(bad);
    assert!(sends(&out).is_empty());
    assert!(out.iter().any(|o| matches!(o, Output::Note { kind: "reject", .. })));
    assert_eq!(r.stats().rejected, 1);

    // The valid one is still accepted afterwards.
    let s = r.handle(good);
    assert!(sends(&s).iter().any(|(_, m)| matches!(m.payload, Payload::Prepare(_))));
}

#[test]
fn pre_prepare_checks() {
    let (ring, mut r) = setup(1, 3);
    // Too few proposals.
    let short = pre_prepare(&ring, 0, &[0, 1]);
    assert!(sends(&r.handle(short)).is_empty());
    // Two proposals from the same sender.
    let dup = pre_prepare(&ring, 0, &[0, 1, 1]);
    assert!(sends(&r.handle(dup)).is_empty());
    // Not from the primary of view 0.
    let good = pre_prepare(&ring, 0, &[0, 1, 2]);
    let Payload::PrePrepare { digest, proposals } = good.payload.clone() else {
        unreachable!()
    };
    let wrong = ring.signer(2).sign(0, 0, Payload::PrePrepare { digest, proposals });
    assert!(sends(&r.handle(wrong)).is_empty());
    // Forged tag.
    let mut forged = good.clone();
    forged.tag[0] ^= 1;
    assert!(sends(&r.handle(forged)).is_empty());
    assert_eq!(r.stats().rejected, 4);

    // A second, different pre-prepare for the same slot after acceptance.
    assert_eq!(sends(&r.handle(good)).len(), 1);
    let other = pre_prepare(&ring, 0, &[1, 2, 3]);
    let other = {
        let Payload::PrePrepare { proposals, .. } = other.payload else {
            unreachable!()
        };
        let mut p = proposals;
        p[0] = pre_propose(&ring, 1, 0, proposal(&[3]));
        p[1] = pre_propose(&ring, 2, 0, proposal(&[3]));
        let props: Vec<Proposal> = p
            .iter()
            .map(|m| match &m.payload {
                Payload::PrePropose(x) => x.clone(),
                _ => unreachable!(),
            })
            .collect();
        let digest = aggregate(&props, 1).digest();
        ring.signer(0).sign(0, 0, Payload::PrePrepare { digest, proposals: p })
    };
    assert!(sends(&r.handle(other)).is_empty());
    assert_eq!(r.stats().rejected, 5);
}

fn digest_of(pp: &ConsensusMessage) -> [u8; 32] {
    *pp.payload.digest().unwrap()
}

#[test]
fn prepared_after_2f_plus_1_prepares_then_commits() {
    let (ring, mut r) = setup(1, 3);
    let pp = pre_prepare(&ring, 0, &[0, 1, 2]);
    let d = digest_of(&pp);
    r.handle(pp);
    assert!(sends(&r.handle(ring.signer(0).sign(0, 0, Payload::Prepare(d)))).is_empty());
    assert!(sends(&r.handle(ring.signer(1).sign(0, 0, Payload::Prepare(d)))).is_empty());
    assert!(!r.is_prepared(0, 0));
    let out = r.handle(ring.signer(2).sign(0, 0, Payload::Prepare(d)));
    assert!(r.is_prepared(0, 0));
    let s = sends(&out);
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].1.payload, Payload::Commit(d));

    // 2f+1 commits execute.
    r.handle(ring.signer(0).sign(0, 0, Payload::Commit(d)));
    r.handle(ring.signer(1).sign(0, 0, Payload::Commit(d)));
    assert!(r.committed_digest(0).is_none());
    let out = r.handle(ring.signer(3).sign(0, 0, Payload::Commit(d)));
    let exec: Vec<_> = out
        .iter()
        .filter_map(|o| match o {
            Output::Execute(e) => Some(e),
            _ => None,
        })
        .collect();
    assert_eq!(exec.len(), 1);
    assert_eq!(exec[0].digest, d);
    assert_eq!(exec[0].batch.len(), 3);
    assert!(r.is_executed(0));
    // Execution happens once.
    let again = r.handle(ring.signer(2).sign(0, 0, Payload::Commit(d)));
    assert!(!again.iter().any(|o| matches!(o, Output::Execute(_))));
}

#[test]
fn f_plus_1_commits_amplify_only_with_the_pre_prepare() {
    let (ring, mut r) = setup(3, 3);
    let pp = pre_prepare(&ring, 0, &[0, 1, 2]);
    let d = digest_of(&pp);
    // Without the pre-prepare nothing is sent.
    assert!(sends(&r.handle(ring.signer(0).sign(0, 0, Payload::Commit(d)))).is_empty());
    assert!(sends(&r.handle(ring.signer(1).sign(0, 0, Payload::Commit(d)))).is_empty());
    let out = r.handle(pp);
    let s = sends(&out);
    // PREPARE on acceptance, then the amplified COMMIT once the two stored
    // commits are re-examined by the next one.
    assert!(s.iter().any(|(_, m)| m.payload == Payload::Prepare(d)));
    let out = r.handle(ring.signer(2).sign(0, 0, Payload::Commit(d)));
    let s = sends(&out);
    assert!(s.iter().any(|(_, m)| m.payload == Payload::Commit(d) && m.sender == 3));
}

#[test]
fn execution_waits_for_the_batch_bytes() {
    let (ring, mut r) = setup(3, 3);
    let pp = pre_prepare(&ring, 0, &[0, 1, 2]);
    let d = digest_of(&pp);
    for p in [0, 1, 2] {
        let out = r.handle(ring.signer(p).sign(0, 0, Payload::Commit(d)));
        assert!(!out.iter().any(|o| matches!(o, Output::Execute(_))));
    }
    assert_eq!(r.committed_digest(0), Some(d));
    assert!(!r.is_executed(0));
    let out = r.handle(pp);
    assert!(out.iter().any(|o| matches!(o, Output::Execute(e) if e.digest == d)));
}

#[test]
fn stale_requests_are_dropped_and_counted() {
    let (ring, mut r) = setup(2, 1);
    // Move replica 2 to view 1 through a valid NEW-VIEW.
    let vcs: Vec<ConsensusMessage> = [0, 1, 3]
        .iter()
        .map(|&i| ring.signer(i).sign(1, 0, Payload::ViewChange(vec![])))
        .collect();
    let nv = ring.signer(1).sign(
        1,
        0,
        Payload::NewView {
            view_changes: vcs,
            pre_prepares: vec![],
        },
    );
    r.handle(nv);
    assert_eq!(r.view(), 1);
    assert!(sends(&r.handle(request(&ring, 0, 0, 9))).is_empty());
    assert_eq!(r.stats().stale_requests, 1);
    assert!(r.pending_requests(9).is_none());
    // Current-view requests still count; with batch size 1 it proposes to
    // the view-1 primary.
    let s = r.handle(request(&ring, 0, 1, 9));
    assert_eq!(sends(&s)[0].0, Dest::To(1));
}

#[test]
fn new_view_with_wrong_reissue_set_is_rejected() {
    let (ring, mut r) = setup(2, 3);
    let vcs: Vec<ConsensusMessage> = [0, 1, 3]
        .iter()
        .map(|&i| ring.signer(i).sign(1, 0, Payload::ViewChange(vec![])))
        .collect();
    // Re-issues a slot no certificate covers.
    let stray = pre_prepare(&ring, 4, &[0, 1, 2]);
    let Payload::PrePrepare { digest, proposals } = stray.payload else {
        unreachable!()
    };
    let reissued = ring.signer(1).sign(1, 4, Payload::PrePrepare { digest, proposals });
    let nv = ring.signer(1).sign(
        1,
        0,
        Payload::NewView {
            view_changes: vcs,
            pre_prepares: vec![reissued],
        },
    );
    let out = r.handle(nv);
    assert_eq!(r.view(), 0);
    assert!(r.in_view_change());
    // It moves on to view 2 instead.
    assert!(sends(&out)
        .iter()
        .any(|(_, m)| matches!(m.payload, Payload::ViewChange(_)) && m.view == 2));
}

#[test]
fn timer_escalates_the_view_change_target() {
    let (ring, mut r) = setup(2, 1);
    let out = r.handle(request(&ring, 0, 0, 0));
    let Some(Output::SetTimer { id, after }) = out.iter().find(|o| matches!(o, Output::SetTimer { .. })).cloned()
    else {
        panic!("proposal arms the timer");
    };
    assert_eq!(after, 4 * 5 + 1);
    let out = r.on_timer(id);
    assert!(sends(&out).iter().any(|(_, m)| m.view == 1));
    let Some(Output::SetTimer { id, after }) = out.iter().find(|o| matches!(o, Output::SetTimer { .. })).cloned()
    else {
        panic!("view change re-arms the timer");
    };
    assert_eq!(after, 8 * 5 + 1);
    // A stale epoch does nothing.
    assert!(r.on_timer(id - 1).is_empty());
    let out = r.on_timer(id);
    assert!(sends(&out).iter().any(|(_, m)| m.view == 2));
}
