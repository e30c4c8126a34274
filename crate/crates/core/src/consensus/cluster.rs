//! A full replica group on the simulator, plus the checks run over its
//! commit logs.

use std::collections::{BTreeMap, BTreeSet};

use super::auth::Keyring;
use super::byzantine::{Equivocator, InconsistentDealer};
use super::message::{ConsensusMessage, Digest};
use super::replica::{Output, Replica, ReplicaConfig};
use super::ConsensusError;
use crate::netsim::{
    max_faults, AdversaryPolicy, Behavior, Context, NetConfig, Node, NodeId, RunOutcome, SimStats, Simulator, Time,
    Trace,
};

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    pub n: usize,
    /// Defaults to 2f+1.
    pub batch_size: Option<usize>,
    pub net: NetConfig,
    pub drop_prob: f64,
    pub duplicate_prob: f64,
    pub tamper_prob: f64,
    pub isolate: BTreeSet<NodeId>,
    pub behaviors: BTreeMap<NodeId, Behavior>,
    /// (slot, time) pairs: every replica broadcasts its request for the slot
    /// at that time.
    pub submissions: Vec<(u64, Time)>,
    /// How long a delayed dealer holds back its requests.
    pub late_by: Time,
    pub until: Time,
    pub key_seed: u64,
}

impl ClusterConfig {
    pub fn new(n: usize) -> Self {
        ClusterConfig {
            n,
            batch_size: None,
            net: NetConfig::default(),
            drop_prob: 0.0,
            duplicate_prob: 0.0,
            tamper_prob: 0.0,
            isolate: BTreeSet::new(),
            behaviors: BTreeMap::new(),
            submissions: Vec::new(),
            late_by: 0,
            until: 100_000,
            key_seed: 0,
        }
    }

    /// Slots 0..count submitted every `interval` ticks from `start`.
    pub fn with_slots(mut self, count: u64, start: Time, interval: Time) -> Self {
        self.submissions = (0..count).map(|s| (s, start + s * interval)).collect();
        self
    }

    pub fn f(&self) -> usize {
        max_faults(self.n)
    }

    pub fn honest(&self) -> Vec<NodeId> {
        (0..self.n as NodeId)
            .filter(|id| !self.behaviors.contains_key(id))
            .collect()
    }

    pub fn slots(&self) -> BTreeSet<u64> {
        self.submissions.iter().map(|&(s, _)| s).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitRecord {
    pub time: Time,
    pub view: u64,
    pub digest: Digest,
    pub requests: usize,
}

pub fn request_bytes(id: NodeId, seq: u64) -> Vec<u8> {
    format!("update:{id}:{seq}").into_bytes()
}

pub struct ClusterNode {
    replica: Replica,
    behavior: Option<Behavior>,
    equivocator: Option<Equivocator>,
    dealer: Option<InconsistentDealer>,
    schedule: Vec<(u64, Time)>,
    log: BTreeMap<u64, CommitRecord>,
}

impl ClusterNode {
    pub fn replica(&self) -> &Replica {
        &self.replica
    }

    pub fn log(&self) -> &BTreeMap<u64, CommitRecord> {
        &self.log
    }

    fn apply(&mut self, ctx: &mut Context<'_, ConsensusMessage>, outputs: Vec<Output>) {
        let outputs = match (&mut self.equivocator, &self.dealer) {
            (Some(e), _) => e.rewrite(outputs),
            (_, Some(d)) => d.rewrite(outputs),
            _ => outputs,
        };
        for o in outputs {
            match o {
                Output::Send { to, msg } => ctx.dispatch(to, msg),
                Output::SetTimer { id, after } => ctx.set_timer(id * 2, after),
                Output::Execute(e) => {
                    ctx.note("execute", || {
                        format!("sq={} v={} requests={}", e.seq, e.view, e.batch.len())
                    });
                    self.log.entry(e.seq).or_insert(CommitRecord {
                        time: ctx.now(),
                        view: e.view,
                        digest: e.digest,
                        requests: e.batch.len(),
                    });
                }
                Output::Note { kind, detail } => ctx.note(kind, || detail),
            }
        }
    }
}

impl Node for ClusterNode {
    type Msg = ConsensusMessage;

    fn on_start(&mut self, ctx: &mut Context<'_, ConsensusMessage>) {
        if self.behavior == Some(Behavior::Silent) {
            return;
        }
        for (i, &(_, at)) in self.schedule.iter().enumerate() {
            ctx.set_timer(2 * i as u64 + 1, at);
        }
    }

    fn on_message(&mut self, ctx: &mut Context<'_, ConsensusMessage>, _from: NodeId, msg: ConsensusMessage) {
        if self.behavior == Some(Behavior::Silent) {
            return;
        }
        if let Some(e) = &mut self.equivocator {
            e.observe(&msg);
        }
        let out = self.replica.handle(msg);
        self.apply(ctx, out);
    }

    fn on_timer(&mut self, ctx: &mut Context<'_, ConsensusMessage>, id: u64) {
        let out = if id % 2 == 1 {
            let seq = self.schedule[(id / 2) as usize].0;
            self.replica
                .broadcast_update(seq, request_bytes(self.replica.id(), seq))
        } else {
            self.replica.on_timer(id / 2)
        };
        self.apply(ctx, out);
    }
}

#[derive(Clone, Debug)]
pub struct ClusterReport {
    pub n: usize,
    pub f: usize,
    pub honest: Vec<NodeId>,
    /// Commit logs of honest replicas only.
    pub logs: BTreeMap<NodeId, BTreeMap<u64, CommitRecord>>,
    pub final_views: BTreeMap<NodeId, u64>,
    pub rejected: u64,
    pub stale_requests: u64,
    pub view_changes_started: u64,
    pub outcome: RunOutcome,
    pub end_time: Time,
    pub sim: SimStats,
    pub trace: Trace,
}

impl ClusterReport {
    /// Slots where two honest replicas executed different digests.
    pub fn conflicts(&self) -> Vec<(u64, BTreeSet<Digest>)> {
        let mut by_slot: BTreeMap<u64, BTreeSet<Digest>> = BTreeMap::new();
        for log in self.logs.values() {
            for (seq, rec) in log {
                by_slot.entry(*seq).or_default().insert(rec.digest);
            }
        }
        by_slot.into_iter().filter(|(_, d)| d.len() > 1).collect()
    }

    pub fn is_safe(&self) -> bool {
        self.conflicts().is_empty()
    }

    pub fn committed_everywhere(&self, seq: u64) -> bool {
        self.logs.values().all(|l| l.contains_key(&seq))
    }

    /// Time by which every honest replica had executed `seq`.
    pub fn completion_time(&self, seq: u64) -> Option<Time> {
        self.logs
            .values()
            .map(|l| l.get(&seq).map(|r| r.time))
            .collect::<Option<Vec<_>>>()
            .and_then(|t| t.into_iter().max())
    }
}

pub fn build_nodes(cfg: &ClusterConfig) -> Result<(AdversaryPolicy, Vec<ClusterNode>), ConsensusError> {
    let n = cfg.n;
    let f = cfg.f();
    let mut adversary = AdversaryPolicy::new(n);
    adversary.drop_prob = cfg.drop_prob;
    adversary.duplicate_prob = cfg.duplicate_prob;
    adversary.tamper_prob = cfg.tamper_prob;
    adversary.isolate = cfg.isolate.clone();
    for &id in cfg.behaviors.keys() {
        adversary.corrupt(id)?;
    }
    let ring = Keyring::generate(n, cfg.key_seed);
    let mut nodes = Vec::with_capacity(n);
    for id in 0..n as NodeId {
        let mut rc = ReplicaConfig::new(id, n, cfg.net.delta);
        if let Some(b) = cfg.batch_size {
            rc.batch_size = b;
        }
        let replica = Replica::new(rc, ring.signer(id), ring.verifier())?;
        let behavior = cfg.behaviors.get(&id).copied();
        let mut schedule = cfg.submissions.clone();
        if behavior == Some(Behavior::DelayedShareDealer) {
            for s in &mut schedule {
                s.1 += cfg.late_by;
            }
        }
        nodes.push(ClusterNode {
            replica,
            behavior,
            equivocator: (behavior == Some(Behavior::Equivocate)).then(|| Equivocator::new(ring.signer(id), n, f)),
            dealer: (behavior == Some(Behavior::InconsistentDealer))
                .then(|| InconsistentDealer::new(ring.signer(id), n)),
            schedule,
            log: BTreeMap::new(),
        });
    }
    Ok((adversary, nodes))
}

/// Runs until every honest replica has executed every submitted slot or the
/// time limit passes.
pub fn run_cluster(cfg: &ClusterConfig) -> Result<ClusterReport, ConsensusError> {
    let (adversary, nodes) = build_nodes(cfg)?;
    let honest = cfg.honest();
    let slots = cfg.slots();
    let mut sim = Simulator::new(cfg.net.clone(), adversary, nodes)?;
    let outcome = sim.run_until(cfg.until, |nodes, _| {
        honest
            .iter()
            .all(|&id| slots.iter().all(|s| nodes[id as usize].log.contains_key(s)))
    })?;
    let end_time = sim.now();
    let stats = sim.stats().clone();
    let trace = sim.trace().clone();
    let nodes = sim.into_nodes();
    let mut report = ClusterReport {
        n: cfg.n,
        f: cfg.f(),
        honest: honest.clone(),
        logs: BTreeMap::new(),
        final_views: BTreeMap::new(),
        rejected: 0,
        stale_requests: 0,
        view_changes_started: 0,
        outcome,
        end_time,
        sim: stats,
        trace,
    };
    for id in honest {
        let node = &nodes[id as usize];
        let st = node.replica.stats();
        report.rejected += st.rejected;
        report.stale_requests += st.stale_requests;
        report.view_changes_started += st.view_changes_started;
        report.final_views.insert(id, node.replica.view());
        report.logs.insert(id, node.log.clone());
    }
    Ok(report)
}
