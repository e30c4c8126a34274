use std::collections::BTreeSet;

use proptest::prelude::*;
use sharebft::consensus::cluster::{run_cluster, ClusterConfig};
use sharebft::consensus::{min_quorum_overlap, quorum};
use sharebft::netsim::{max_faults, Behavior, NetConfig, RunOutcome};

fn net(gst: u64, delta: u64, seed: u64) -> NetConfig {
    NetConfig {
        gst,
        delta,
        seed,
        ..NetConfig::default()
    }
}

#[test]
fn honest_group_commits_every_slot() {
    for n in [4, 7, 10] {
        let mut cfg = ClusterConfig::new(n).with_slots(5, 0, 3);
        cfg.net = net(0, 2, 11);
        let r = run_cluster(&cfg).unwrap();
        assert_eq!(r.outcome, RunOutcome::Stopped, "n = {n}");
        assert!(r.is_safe());
        for s in 0..5 {
            assert!(r.committed_everywhere(s));
        }
        assert_eq!(r.view_changes_started, 0);
        assert_eq!(r.rejected, 0);
    }
}

#[test]
fn honest_batches_hold_every_request_when_waiting_for_all() {
    let mut cfg = ClusterConfig::new(4).with_slots(3, 0, 5);
    cfg.batch_size = Some(4);
    cfg.net = net(0, 3, 2);
    let r = run_cluster(&cfg).unwrap();
    for log in r.logs.values() {
        for rec in log.values() {
            assert_eq!(rec.requests, 4);
        }
    }
}

#[test]
fn silent_primary_is_replaced() {
    let mut cfg = ClusterConfig::new(4).with_slots(3, 0, 2);
    cfg.behaviors.insert(0, Behavior::Silent);
    cfg.net = net(0, 2, 5);
    let r = run_cluster(&cfg).unwrap();
    assert_eq!(r.outcome, RunOutcome::Stopped);
    assert!(r.is_safe());
    assert!(r.final_views.values().all(|&v| v >= 1));
    for rec in r.logs.values().flat_map(|l| l.values()) {
        assert!(rec.view >= 1);
        // Only the three honest requests can reach f+1 proposals.
        assert_eq!(rec.requests, 3);
    }
}

#[test]
fn consecutive_faulty_primaries_are_skipped() {
    let mut cfg = ClusterConfig::new(7).with_slots(2, 0, 2);
    cfg.behaviors.insert(0, Behavior::Silent);
    cfg.behaviors.insert(1, Behavior::Equivocate);
    cfg.net = net(0, 2, 9);
    let r = run_cluster(&cfg).unwrap();
    assert_eq!(r.outcome, RunOutcome::Stopped);
    assert!(r.is_safe());
    assert!(r.logs.values().flat_map(|l| l.values()).all(|rec| rec.view >= 1));
}

#[test]
fn equivocating_primary_never_splits_honest_logs() {
    for seed in 0..20 {
        let mut cfg = ClusterConfig::new(4).with_slots(3, 0, 1);
        cfg.behaviors.insert(0, Behavior::Equivocate);
        cfg.net = net(0, 3, seed);
        let r = run_cluster(&cfg).unwrap();
        assert!(r.is_safe(), "seed {seed}: {:?}", r.conflicts());
        assert_eq!(r.outcome, RunOutcome::Stopped, "seed {seed}");
    }
}

#[test]
fn inconsistent_dealer_requests_are_dropped() {
    let mut cfg = ClusterConfig::new(4).with_slots(2, 0, 4);
    cfg.behaviors.insert(3, Behavior::InconsistentDealer);
    cfg.net = net(0, 2, 3);
    let r = run_cluster(&cfg).unwrap();
    assert_eq!(r.outcome, RunOutcome::Stopped);
    assert!(r.is_safe());
    for rec in r.logs.values().flat_map(|l| l.values()) {
        assert!(rec.requests <= 3);
    }
}

#[test]
fn tampered_messages_are_rejected_without_harm() {
    let mut cfg = ClusterConfig::new(4).with_slots(3, 0, 2);
    cfg.tamper_prob = 0.05;
    cfg.net = net(0, 2, 8);
    let r = run_cluster(&cfg).unwrap();
    assert!(r.sim.tampered > 0);
    assert!(r.rejected > 0);
    assert!(r.is_safe());
}

#[test]
fn progress_resumes_after_gst() {
    let delta = 4;
    let gst = 200;
    let mut cfg = ClusterConfig::new(4).with_slots(3, 0, 10);
    cfg.drop_prob = 0.3;
    cfg.duplicate_prob = 0.1;
    cfg.net = net(gst, delta, 21);
    cfg.until = 1_000_000;
    let r = run_cluster(&cfg).unwrap();
    assert_eq!(r.outcome, RunOutcome::Stopped);
    assert!(r.is_safe());
}

#[test]
fn quorum_overlap_holds_an_honest_replica() {
    for f in 0..50 {
        let n = 3 * f + 1;
        assert_eq!(max_faults(n), f);
        assert!(min_quorum_overlap(n, f) > f);
    }
    // With n = 3f the f faulty replicas can stall every quorum.
    for f in 1..50 {
        assert!(quorum(f) > 3 * f - f);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn honest_logs_agree_under_random_faults(
        seed in 0u64..10_000,
        n in prop::sample::select(vec![4usize, 7]),
        gst in 0u64..120,
        drop_prob in 0.0f64..0.5,
        dup in 0.0f64..0.3,
        kinds in prop::collection::vec(0u8..4, 0..=2),
        victims in prop::collection::btree_set(0u32..7, 0..=2),
    ) {
        let f = max_faults(n);
        let mut cfg = ClusterConfig::new(n).with_slots(3, 0, 5);
        cfg.net = net(gst, 3, seed);
        cfg.drop_prob = drop_prob;
        cfg.duplicate_prob = dup;
        cfg.late_by = 30;
        cfg.until = 400_000;
        let victims: BTreeSet<u32> = victims.into_iter().filter(|&v| (v as usize) < n).take(f).collect();
        for (v, k) in victims.iter().zip(kinds.iter().cycle()) {
            let b = match k {
                0 => Behavior::Silent,
                1 => Behavior::Equivocate,
                2 => Behavior::InconsistentDealer,
                _ => Behavior::DelayedShareDealer,
            };
            cfg.behaviors.insert(*v, b);
        }
        let r = run_cluster(&cfg).unwrap();
        prop_assert!(r.is_safe(), "conflicts {:?}", r.conflicts());
        prop_assert_eq!(r.outcome, RunOutcome::Stopped);
    }
}
