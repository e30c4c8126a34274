use std::collections::{BTreeMap, BTreeSet};

use log::debug;

use super::auth::{Signer, Verifier};
use super::batch::{aggregate, Batch};
use super::message::{Certificate, ConsensusMessage, Digest, Kind, Payload, Proposal};
use super::ConsensusError;
use crate::netsim::{max_faults, Dest, NodeId, Time, WireMessage};

/// Timeouts stop doubling after this many consecutive failed views.
const MAX_BACKOFF: u32 = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplicaConfig {
    pub id: NodeId,
    pub n: usize,
    pub f: usize,
    /// Requests needed before a replica sends its PRE-PROPOSE.
    pub batch_size: usize,
    /// Post-GST delay bound; the progress timeout is 4 * delta * 2^backoff.
    pub delta: Time,
}

impl ReplicaConfig {
    pub fn new(id: NodeId, n: usize, delta: Time) -> Self {
        let f = max_faults(n);
        ReplicaConfig {
            id,
            n,
            f,
            batch_size: 2 * f + 1,
            delta,
        }
    }

    pub fn validate(&self) -> Result<(), ConsensusError> {
        if self.n < 3 * self.f + 1 {
            return Err(ConsensusError::Config(format!(
                "n = {} cannot tolerate f = {}",
                self.n, self.f
            )));
        }
        if self.id as usize >= self.n {
            return Err(ConsensusError::Config(format!("id {} out of range", self.id)));
        }
        if self.batch_size == 0 || self.batch_size > self.n {
            return Err(ConsensusError::Config(format!(
                "batch_size {} outside 1..={}",
                self.batch_size, self.n
            )));
        }
        if self.delta == 0 {
            return Err(ConsensusError::Config("delta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Execution {
    pub seq: u64,
    pub view: u64,
    pub digest: Digest,
    pub batch: Batch,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Output {
    Send { to: Dest, msg: ConsensusMessage },
    Execute(Execution),
    SetTimer { id: u64, after: Time },
    Note { kind: &'static str, detail: String },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplicaStats {
    pub rejected: u64,
    pub stale_requests: u64,
    pub view_changes_started: u64,
    pub views_installed: u64,
    pub executed: u64,
}

#[derive(Debug, Default)]
struct Slot {
    /// Accepted PRE-PREPARE per view.
    accepted: BTreeMap<u64, (Digest, ConsensusMessage)>,
    /// Batches are content-addressed, so any validated PRE-PREPARE may
    /// supply one, whatever its view.
    batches: BTreeMap<Digest, Batch>,
    sources: BTreeMap<Digest, ConsensusMessage>,
    prepares: BTreeMap<(u64, Digest), BTreeMap<NodeId, ConsensusMessage>>,
    commits: BTreeMap<(u64, Digest), BTreeMap<NodeId, ConsensusMessage>>,
    prepared: BTreeSet<u64>,
    commit_sent: BTreeSet<u64>,
    /// Highest-view certificate held for this slot.
    certificate: Option<Certificate>,
    committed: Option<(u64, Digest)>,
    executed: bool,
    /// Kept after execution to bring lagging replicas up to date: the
    /// PRE-PREPARE that supplied the batch and 2f+1 matching COMMITs.
    proof: Vec<ConsensusMessage>,
}

impl Slot {
    fn offer_certificate(&mut self, cert: Certificate) {
        let better = match &self.certificate {
            None => true,
            Some(c) => cert.pre_prepare.view > c.pre_prepare.view,
        };
        if better {
            self.certificate = Some(cert);
        }
    }
}

fn proposal_of(msg: &ConsensusMessage) -> &Proposal {
    match &msg.payload {
        Payload::PrePropose(p) => p,
        _ => unreachable!("only validated PRE-PROPOSE messages reach here"),
    }
}

fn well_formed_proposal(prop: &Proposal, n: usize) -> bool {
    prop.windows(2).all(|w| w[0].0 < w[1].0) && prop.iter().all(|(s, _)| (*s as usize) < n)
}

fn cert_digest(cert: &Certificate) -> Digest {
    *cert
        .pre_prepare
        .payload
        .digest()
        .expect("certificates hold validated PRE-PREPAREs")
}

/// For each slot, the certificate from the highest view among the given
/// VIEW-CHANGE messages. Ties keep the smaller digest.
fn reissue_set(view_changes: &[ConsensusMessage]) -> BTreeMap<u64, Certificate> {
    let mut best: BTreeMap<u64, Certificate> = BTreeMap::new();
    for vc in view_changes {
        let Payload::ViewChange(certs) = &vc.payload else {
            continue;
        };
        for c in certs {
            let seq = c.pre_prepare.seq;
            let replace = match best.get(&seq) {
                None => true,
                Some(b) => {
                    (c.pre_prepare.view, std::cmp::Reverse(cert_digest(c)))
                        > (b.pre_prepare.view, std::cmp::Reverse(cert_digest(b)))
                }
            };
            if replace {
                best.insert(seq, c.clone());
            }
        }
    }
    best
}

/// One replica of the pre-propose PBFT variant. Every entry point consumes
/// one event and returns the resulting outputs; the caller owns time.
pub struct Replica {
    cfg: ReplicaConfig,
    signer: Signer,
    verifier: Verifier,
    view: u64,
    /// Target view while a view change is in progress.
    changing_to: Option<u64>,
    pending_requests: BTreeMap<u64, BTreeMap<NodeId, Vec<u8>>>,
    own_requests: BTreeMap<u64, Vec<u8>>,
    own_proposals: BTreeMap<u64, Proposal>,
    initial_proposals: BTreeMap<u64, BTreeMap<NodeId, ConsensusMessage>>,
    issued: BTreeSet<(u64, u64)>,
    slots: BTreeMap<u64, Slot>,
    view_changes: BTreeMap<u64, BTreeMap<NodeId, ConsensusMessage>>,
    new_view_sent: BTreeSet<u64>,
    helped: BTreeSet<(NodeId, u64)>,
    future: BTreeMap<u64, Vec<ConsensusMessage>>,
    timer_epoch: u64,
    timer_armed: bool,
    backoff: u32,
    stats: ReplicaStats,
}

impl Replica {
    pub fn new(cfg: ReplicaConfig, signer: Signer, verifier: Verifier) -> Result<Self, ConsensusError> {
        cfg.validate()?;
        if signer.id() != cfg.id {
            return Err(ConsensusError::Config("signer belongs to another replica".into()));
        }
        if verifier.n() != cfg.n {
            return Err(ConsensusError::Config("verifier covers a different group size".into()));
        }
        Ok(Replica {
            cfg,
            signer,
            verifier,
            view: 0,
            changing_to: None,
            pending_requests: BTreeMap::new(),
            own_requests: BTreeMap::new(),
            own_proposals: BTreeMap::new(),
            initial_proposals: BTreeMap::new(),
            issued: BTreeSet::new(),
            slots: BTreeMap::new(),
            view_changes: BTreeMap::new(),
            new_view_sent: BTreeSet::new(),
            helped: BTreeSet::new(),
            future: BTreeMap::new(),
            timer_epoch: 0,
            timer_armed: false,
            backoff: 0,
            stats: ReplicaStats::default(),
        })
    }

    pub fn id(&self) -> NodeId {
        self.cfg.id
    }

    pub fn config(&self) -> &ReplicaConfig {
        &self.cfg
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn in_view_change(&self) -> bool {
        self.changing_to.is_some()
    }

    pub fn primary(&self, view: u64) -> NodeId {
        (view % self.cfg.n as u64) as NodeId
    }

    pub fn stats(&self) -> &ReplicaStats {
        &self.stats
    }

    pub fn backoff(&self) -> u32 {
        self.backoff
    }

    /// 4 * delta * 2^backoff, plus one tick so that a commit landing exactly
    /// on the bound still counts as in time.
    pub fn current_timeout(&self) -> Time {
        4 * self.cfg.delta * (1u64 << self.backoff.min(MAX_BACKOFF)) + 1
    }

    pub fn pending_requests(&self, seq: u64) -> Option<&BTreeMap<NodeId, Vec<u8>>> {
        self.pending_requests.get(&seq)
    }

    pub fn committed_digest(&self, seq: u64) -> Option<Digest> {
        self.slots.get(&seq).and_then(|s| s.committed).map(|(_, d)| d)
    }

    pub fn is_executed(&self, seq: u64) -> bool {
        self.slots.get(&seq).is_some_and(|s| s.executed)
    }

    pub fn is_prepared(&self, seq: u64, view: u64) -> bool {
        self.slots.get(&seq).is_some_and(|s| s.prepared.contains(&view))
    }

    /// Broadcasts this replica's request for a slot, including to itself.
    pub fn broadcast_update(&mut self, seq: u64, req: Vec<u8>) -> Vec<Output> {
        // A late request for a decided slot must not keep the timer alive.
        if !self.slot_committed(seq) {
            self.own_requests.insert(seq, req.clone());
        }
        let msg = self.signer.sign(self.view, seq, Payload::Request(req));
        let mut out = vec![Output::Send { to: Dest::All, msg }];
        if !self.slot_committed(seq) && !self.timer_armed {
            // One extra hop for the requests themselves.
            let after = self.current_timeout() + self.cfg.delta;
            self.restart_timer_after(after, &mut out);
        }
        out
    }

    pub fn handle(&mut self, msg: ConsensusMessage) -> Vec<Output> {
        let mut out = Vec::new();
        self.dispatch(msg, &mut out);
        out
    }

    pub fn on_timer(&mut self, id: u64) -> Vec<Output> {
        let mut out = Vec::new();
        if !self.timer_armed || id != self.timer_epoch {
            return out;
        }
        self.timer_armed = false;
        match self.changing_to {
            Some(target) => self.start_view_change(target + 1, &mut out),
            None if self.waiting() => self.start_view_change(self.view + 1, &mut out),
            None => {}
        }
        out
    }

    fn dispatch(&mut self, msg: ConsensusMessage, out: &mut Vec<Output>) {
        if !self.verifier.verify(&msg) {
            self.reject(out, &msg, "bad authentication tag");
            return;
        }
        match msg.kind() {
            Kind::Request => self.on_request(msg, out),
            Kind::PrePropose => self.on_pre_propose(msg, out),
            Kind::PrePrepare => self.on_pre_prepare(msg, out),
            Kind::Prepare => self.on_prepare(msg, out),
            Kind::Commit => self.on_commit(msg, out),
            Kind::ViewChange => self.on_view_change(msg, out),
            Kind::NewView => self.on_new_view(msg, out),
        }
    }

    fn reject(&mut self, out: &mut Vec<Output>, msg: &ConsensusMessage, reason: &'static str) {
        self.stats.rejected += 1;
        debug!("replica {} rejected {}: {reason}", self.cfg.id, msg.summary());
        out.push(Output::Note {
            kind: "reject",
            detail: format!("{}: {reason}", msg.summary()),
        });
    }

    fn slot_committed(&self, seq: u64) -> bool {
        self.slots.get(&seq).is_some_and(|s| s.committed.is_some())
    }

    fn buffer(&mut self, msg: ConsensusMessage) {
        self.future.entry(msg.view).or_default().push(msg);
    }

    /// True while some slot this replica submitted to, proposed to or
    /// pre-prepared in the current view has not executed.
    fn waiting(&self) -> bool {
        !self.own_requests.is_empty()
            || !self.own_proposals.is_empty()
            || self
                .slots
                .values()
                .any(|s| !s.executed && s.accepted.contains_key(&self.view))
    }

    fn arm_timer(&mut self, out: &mut Vec<Output>) {
        if !self.timer_armed {
            self.restart_timer(out);
        }
    }

    fn restart_timer(&mut self, out: &mut Vec<Output>) {
        self.restart_timer_after(self.current_timeout(), out);
    }

    fn restart_timer_after(&mut self, after: Time, out: &mut Vec<Output>) {
        self.timer_epoch += 1;
        self.timer_armed = true;
        out.push(Output::SetTimer {
            id: self.timer_epoch,
            after,
        });
    }

    // Normal case.

    fn on_request(&mut self, msg: ConsensusMessage, out: &mut Vec<Output>) {
        let seq = msg.seq;
        if self.slot_committed(seq) {
            return;
        }
        if msg.view < self.view {
            self.stats.stale_requests += 1;
            debug!(
                "replica {} dropped stale request from {} (view {} < {})",
                self.cfg.id, msg.sender, msg.view, self.view
            );
            return;
        }
        let Payload::Request(req) = msg.payload else {
            unreachable!()
        };
        self.pending_requests.entry(seq).or_default().insert(msg.sender, req);
        self.maybe_propose(seq, out);
    }

    fn maybe_propose(&mut self, seq: u64, out: &mut Vec<Output>) {
        if self.own_proposals.contains_key(&seq) || self.slot_committed(seq) {
            return;
        }
        if self.pending_requests.get(&seq).map_or(0, BTreeMap::len) < self.cfg.batch_size {
            return;
        }
        let proposal: Proposal = self
            .pending_requests
            .remove(&seq)
            .unwrap_or_default()
            .into_iter()
            .collect();
        self.own_proposals.insert(seq, proposal.clone());
        let msg = self.signer.sign(self.view, seq, Payload::PrePropose(proposal));
        out.push(Output::Send {
            to: Dest::To(self.primary(self.view)),
            msg,
        });
        self.arm_timer(out);
    }

    fn on_pre_propose(&mut self, msg: ConsensusMessage, out: &mut Vec<Output>) {
        let seq = msg.seq;
        if self.slot_committed(seq) {
            return;
        }
        if !well_formed_proposal(proposal_of(&msg), self.cfg.n) {
            self.reject(out, &msg, "malformed proposal");
            return;
        }
        self.initial_proposals.entry(seq).or_default().insert(msg.sender, msg);
        self.maybe_issue(seq, out);
    }

    fn maybe_issue(&mut self, seq: u64, out: &mut Vec<Output>) {
        let v = self.view;
        if self.changing_to.is_some()
            || self.primary(v) != self.cfg.id
            || self.issued.contains(&(v, seq))
            || self.slot_committed(seq)
            || self.slots.get(&seq).is_some_and(|s| s.accepted.contains_key(&v))
        {
            return;
        }
        if self.initial_proposals.get(&seq).map_or(0, BTreeMap::len) <= 2 * self.cfg.f {
            return;
        }
        let proposals: Vec<ConsensusMessage> = self
            .initial_proposals
            .remove(&seq)
            .unwrap_or_default()
            .into_values()
            .collect();
        let batch = aggregate(proposals.iter().map(proposal_of), self.cfg.f);
        let digest = batch.digest();
        self.issued.insert((v, seq));
        self.pending_requests.remove(&seq);
        let msg = self.signer.sign(v, seq, Payload::PrePrepare { digest, proposals });
        out.push(Output::Send { to: Dest::All, msg });
    }

    /// Recomputes the batch from the attached proposals.
    fn check_pre_prepare(&self, msg: &ConsensusMessage) -> Result<Batch, &'static str> {
        let Payload::PrePrepare { digest, proposals } = &msg.payload else {
            return Err("not a pre-prepare");
        };
        if msg.sender != self.primary(msg.view) {
            return Err("pre-prepare not from the view's primary");
        }
        if proposals.len() <= 2 * self.cfg.f {
            return Err("too few initial proposals");
        }
        let mut senders = BTreeSet::new();
        for p in proposals {
            if p.seq != msg.seq {
                return Err("initial proposal for another slot");
            }
            let Payload::PrePropose(prop) = &p.payload else {
                return Err("attached message is not a pre-propose");
            };
            if !well_formed_proposal(prop, self.cfg.n) {
                return Err("malformed attached proposal");
            }
            if !senders.insert(p.sender) {
                return Err("two proposals from one sender");
            }
            if !self.verifier.verify(p) {
                return Err("bad tag on attached proposal");
            }
        }
        let batch = aggregate(proposals.iter().map(proposal_of), self.cfg.f);
        if batch.digest() != *digest {
            return Err("digest does not match the attached proposals");
        }
        Ok(batch)
    }

    fn on_pre_prepare(&mut self, msg: ConsensusMessage, out: &mut Vec<Output>) {
        let (seq, v) = (msg.seq, msg.view);
        let digest = *msg.payload.digest().expect("pre-prepare carries a digest");
        if v > self.view {
            self.learn_batch(&msg, out);
            self.buffer(msg);
            return;
        }
        if v < self.view || self.changing_to.is_some() {
            self.learn_batch(&msg, out);
            return;
        }
        if let Some((accepted, _)) = self.slots.get(&seq).and_then(|s| s.accepted.get(&v)) {
            if *accepted != digest {
                self.reject(out, &msg, "second pre-prepare for the same view and slot");
            }
            return;
        }
        if let Some((_, d)) = self.slots.get(&seq).and_then(|s| s.committed) {
            if d != digest {
                self.reject(out, &msg, "conflicts with the committed digest");
                return;
            }
        }
        match self.check_pre_prepare(&msg) {
            Ok(batch) => self.accept_pre_prepare(msg, batch, out),
            Err(reason) => self.reject(out, &msg, reason),
        }
    }

    /// A PRE-PREPARE this replica will not vote on can still supply the
    /// batch bytes for a slot that commits without it.
    fn learn_batch(&mut self, msg: &ConsensusMessage, out: &mut Vec<Output>) {
        let digest = *msg.payload.digest().expect("pre-prepare carries a digest");
        let known = self
            .slots
            .get(&msg.seq)
            .is_some_and(|s| s.executed || s.batches.contains_key(&digest));
        if known {
            return;
        }
        if let Ok(batch) = self.check_pre_prepare(msg) {
            let slot = self.slots.entry(msg.seq).or_default();
            slot.batches.insert(digest, batch);
            slot.sources.insert(digest, msg.clone());
            self.try_execute(msg.seq, out);
        }
    }

    fn accept_pre_prepare(&mut self, msg: ConsensusMessage, batch: Batch, out: &mut Vec<Output>) {
        let (seq, v) = (msg.seq, msg.view);
        let digest = batch.digest();
        let slot = self.slots.entry(seq).or_default();
        slot.sources.entry(digest).or_insert_with(|| msg.clone());
        slot.accepted.insert(v, (digest, msg));
        slot.batches.entry(digest).or_insert(batch);
        let executed = slot.executed;
        let prepare = self.signer.sign(v, seq, Payload::Prepare(digest));
        out.push(Output::Send {
            to: Dest::All,
            msg: prepare,
        });
        if !executed {
            self.arm_timer(out);
        }
        self.check_prepared(seq, v, out);
        self.check_committed(seq, out);
    }

    fn on_prepare(&mut self, msg: ConsensusMessage, out: &mut Vec<Output>) {
        let (seq, v) = (msg.seq, msg.view);
        if v > self.view {
            self.buffer(msg);
            return;
        }
        if v < self.view || self.changing_to.is_some() {
            return;
        }
        let d = *msg.payload.digest().expect("prepare carries a digest");
        self.slots
            .entry(seq)
            .or_default()
            .prepares
            .entry((v, d))
            .or_default()
            .insert(msg.sender, msg);
        self.check_prepared(seq, v, out);
    }

    fn check_prepared(&mut self, seq: u64, v: u64, out: &mut Vec<Output>) {
        let quorum = 2 * self.cfg.f + 1;
        let Some(slot) = self.slots.get_mut(&seq) else {
            return;
        };
        if slot.prepared.contains(&v) {
            return;
        }
        let Some((d, pp)) = slot.accepted.get(&v) else {
            return;
        };
        let d = *d;
        let Some(votes) = slot.prepares.get(&(v, d)) else {
            return;
        };
        if votes.len() < quorum {
            return;
        }
        let cert = Certificate {
            pre_prepare: pp.clone(),
            votes: votes.values().take(quorum).cloned().collect(),
        };
        slot.prepared.insert(v);
        slot.offer_certificate(cert);
        self.send_commit(seq, v, d, out);
    }

    fn send_commit(&mut self, seq: u64, v: u64, d: Digest, out: &mut Vec<Output>) {
        let slot = self.slots.entry(seq).or_default();
        if slot.commit_sent.insert(v) {
            let msg = self.signer.sign(v, seq, Payload::Commit(d));
            out.push(Output::Send { to: Dest::All, msg });
        }
    }

    fn on_commit(&mut self, msg: ConsensusMessage, out: &mut Vec<Output>) {
        let (seq, v) = (msg.seq, msg.view);
        if v > self.view {
            // 2f+1 COMMITs decide a slot in any view; the copy is replayed
            // after the view is installed so it can also amplify.
            self.buffer(msg.clone());
        }
        let d = *msg.payload.digest().expect("commit carries a digest");
        let f = self.cfg.f;
        let amplify = self.changing_to.is_none() && v == self.view;
        let slot = self.slots.entry(seq).or_default();
        let votes = slot.commits.entry((v, d)).or_default();
        votes.insert(msg.sender, msg);
        let mut send = false;
        if amplify && votes.len() > f && !slot.commit_sent.contains(&v) {
            if let Some((acc, pp)) = slot.accepted.get(&v) {
                if *acc == d {
                    let cert = Certificate {
                        pre_prepare: pp.clone(),
                        votes: votes.values().take(f + 1).cloned().collect(),
                    };
                    slot.offer_certificate(cert);
                    send = true;
                }
            }
        }
        if send {
            self.send_commit(seq, v, d, out);
        }
        self.check_committed(seq, out);
    }

    fn check_committed(&mut self, seq: u64, out: &mut Vec<Output>) {
        let quorum = 2 * self.cfg.f + 1;
        let Some(slot) = self.slots.get_mut(&seq) else {
            return;
        };
        if slot.committed.is_none() {
            if let Some((&(v, d), _)) = slot.commits.iter().find(|(_, s)| s.len() >= quorum) {
                slot.committed = Some((v, d));
            }
        }
        self.try_execute(seq, out);
    }

    fn try_execute(&mut self, seq: u64, out: &mut Vec<Output>) {
        let Some(slot) = self.slots.get_mut(&seq) else {
            return;
        };
        if slot.executed {
            return;
        }
        let Some((view, digest)) = slot.committed else {
            return;
        };
        let Some(batch) = slot.batches.get(&digest).cloned() else {
            return;
        };
        slot.executed = true;
        if let Some(pp) = slot.sources.remove(&digest) {
            slot.proof.push(pp);
            let commits = slot.commits.get(&(view, digest)).into_iter().flat_map(|c| c.values());
            slot.proof.extend(commits.take(2 * self.cfg.f + 1).cloned());
        }
        slot.prepares.clear();
        slot.commits.clear();
        slot.sources.clear();
        slot.batches.retain(|d, _| *d == digest);
        self.pending_requests.remove(&seq);
        self.initial_proposals.remove(&seq);
        self.own_proposals.remove(&seq);
        self.own_requests.remove(&seq);
        self.stats.executed += 1;
        if self.changing_to.is_none() {
            self.backoff = 0;
        }
        out.push(Output::Execute(Execution {
            seq,
            view,
            digest,
            batch,
        }));
        if self.changing_to.is_none() {
            if self.waiting() {
                self.restart_timer(out);
            } else {
                self.timer_armed = false;
            }
        }
    }

    // View change.

    fn start_view_change(&mut self, target: u64, out: &mut Vec<Output>) {
        if target <= self.view || self.changing_to.is_some_and(|t| t >= target) {
            return;
        }
        self.changing_to = Some(target);
        self.backoff = (self.backoff + 1).min(MAX_BACKOFF);
        self.stats.view_changes_started += 1;
        let certs: Vec<Certificate> = self.slots.values().filter_map(|s| s.certificate.clone()).collect();
        out.push(Output::Note {
            kind: "view-change",
            detail: format!("to view {target} with {} certificates", certs.len()),
        });
        let msg = self.signer.sign(target, 0, Payload::ViewChange(certs));
        out.push(Output::Send { to: Dest::All, msg });
        self.restart_timer(out);
    }

    fn check_certificate(&self, cert: &Certificate) -> Result<(), &'static str> {
        let pp = &cert.pre_prepare;
        if !self.verifier.verify(pp) {
            return Err("bad tag on certified pre-prepare");
        }
        self.check_pre_prepare(pp)?;
        let d = *pp.payload.digest().expect("checked above");
        let Some(first) = cert.votes.first() else {
            return Err("certificate without votes");
        };
        let (kind, needed) = match first.kind() {
            Kind::Prepare => (Kind::Prepare, 2 * self.cfg.f + 1),
            Kind::Commit => (Kind::Commit, self.cfg.f + 1),
            _ => return Err("certificate votes are not prepares or commits"),
        };
        let mut senders = BTreeSet::new();
        for vote in &cert.votes {
            if vote.kind() != kind || vote.view != pp.view || vote.seq != pp.seq || vote.payload.digest() != Some(&d) {
                return Err("certificate vote does not match its pre-prepare");
            }
            if !senders.insert(vote.sender) {
                return Err("duplicate voter in certificate");
            }
            if !self.verifier.verify(vote) {
                return Err("bad tag on certificate vote");
            }
        }
        if senders.len() < needed {
            return Err("certificate below quorum");
        }
        Ok(())
    }

    fn check_view_change(&self, msg: &ConsensusMessage) -> Result<(), &'static str> {
        let Payload::ViewChange(certs) = &msg.payload else {
            return Err("not a view-change");
        };
        for c in certs {
            if c.pre_prepare.view >= msg.view {
                return Err("certificate from a view not below the target");
            }
            self.check_certificate(c)?;
        }
        Ok(())
    }

    fn on_view_change(&mut self, msg: ConsensusMessage, out: &mut Vec<Output>) {
        let target = msg.view;
        if target <= self.view {
            return;
        }
        if let Err(reason) = self.check_view_change(&msg) {
            self.reject(out, &msg, reason);
            return;
        }
        let sender = msg.sender;
        self.view_changes.entry(target).or_default().insert(sender, msg);
        if self.changing_to.is_none() && sender != self.cfg.id && self.helped.insert((sender, target)) {
            self.send_proofs(sender, out);
        }

        // Join once f+1 replicas are already moving past where we are.
        let current = self.changing_to.unwrap_or(self.view);
        let mut senders = BTreeSet::new();
        let mut smallest = None;
        for (&v, vcs) in self.view_changes.range(current + 1..) {
            senders.extend(vcs.keys().copied());
            smallest = smallest.or(Some(v));
        }
        if senders.len() > self.cfg.f {
            if let Some(v) = smallest {
                self.start_view_change(v, out);
            }
        }
        self.maybe_new_view(target, out);
    }

    /// A replica asking to leave a view we are happy in may simply have
    /// missed the traffic that decided earlier slots. Without state
    /// transfer, the per-slot proofs are what lets it execute them.
    fn send_proofs(&self, to: NodeId, out: &mut Vec<Output>) {
        for slot in self.slots.values().filter(|s| s.executed) {
            for m in &slot.proof {
                out.push(Output::Send {
                    to: Dest::To(to),
                    msg: m.clone(),
                });
            }
        }
    }

    fn maybe_new_view(&mut self, target: u64, out: &mut Vec<Output>) {
        let quorum = 2 * self.cfg.f + 1;
        if self.primary(target) != self.cfg.id
            || self.changing_to != Some(target)
            || self.new_view_sent.contains(&target)
        {
            return;
        }
        let Some(vcs) = self.view_changes.get(&target) else {
            return;
        };
        if vcs.len() < quorum {
            return;
        }
        let chosen: Vec<ConsensusMessage> = vcs.values().take(quorum).cloned().collect();
        let pre_prepares = reissue_set(&chosen)
            .into_iter()
            .map(|(seq, cert)| {
                let Payload::PrePrepare { digest, proposals } = cert.pre_prepare.payload else {
                    unreachable!("validated certificate")
                };
                self.signer.sign(target, seq, Payload::PrePrepare { digest, proposals })
            })
            .collect();
        self.new_view_sent.insert(target);
        let msg = self.signer.sign(
            target,
            0,
            Payload::NewView {
                view_changes: chosen,
                pre_prepares,
            },
        );
        out.push(Output::Send { to: Dest::All, msg });
    }

    fn check_new_view(&self, msg: &ConsensusMessage) -> Result<(), &'static str> {
        let Payload::NewView {
            view_changes,
            pre_prepares,
        } = &msg.payload
        else {
            return Err("not a new-view");
        };
        let target = msg.view;
        let mut senders = BTreeSet::new();
        for vc in view_changes {
            if vc.view != target || vc.kind() != Kind::ViewChange {
                return Err("view-change for another view");
            }
            if !self.verifier.verify(vc) {
                return Err("bad tag on enclosed view-change");
            }
            self.check_view_change(vc)?;
            if !senders.insert(vc.sender) {
                return Err("duplicate view-change sender");
            }
        }
        if senders.len() < 2 * self.cfg.f + 1 {
            return Err("fewer than 2f+1 view-changes");
        }
        let expected = reissue_set(view_changes);
        if expected.len() != pre_prepares.len() {
            return Err("re-issued slots differ from the certified ones");
        }
        let mut seen = BTreeSet::new();
        for pp in pre_prepares {
            if pp.view != target || !seen.insert(pp.seq) {
                return Err("re-issued pre-prepare for wrong view or repeated slot");
            }
            if !self.verifier.verify(pp) {
                return Err("bad tag on re-issued pre-prepare");
            }
            let Some(cert) = expected.get(&pp.seq) else {
                return Err("re-issued slot has no certificate");
            };
            if pp.payload.digest() != Some(&cert_digest(cert)) {
                return Err("re-issued digest differs from the certified one");
            }
            self.check_pre_prepare(pp)?;
        }
        Ok(())
    }

    fn on_new_view(&mut self, msg: ConsensusMessage, out: &mut Vec<Output>) {
        let target = msg.view;
        // Having asked for a later view, this replica may not go back.
        if target <= self.view || self.changing_to.is_some_and(|t| target < t) {
            return;
        }
        if msg.sender != self.primary(target) {
            self.reject(out, &msg, "new-view not from the view's primary");
            return;
        }
        match self.check_new_view(&msg) {
            Ok(()) => self.install_view(msg, out),
            Err(reason) => {
                self.reject(out, &msg, reason);
                self.start_view_change(target + 1, out);
            }
        }
    }

    fn install_view(&mut self, msg: ConsensusMessage, out: &mut Vec<Output>) {
        let target = msg.view;
        let Payload::NewView { pre_prepares, .. } = msg.payload else {
            unreachable!()
        };
        self.view = target;
        self.changing_to = None;
        // Doubling only spans consecutive view changes that fail to install.
        self.backoff = 0;
        self.stats.views_installed += 1;
        self.view_changes = self.view_changes.split_off(&(target + 1));
        out.push(Output::Note {
            kind: "new-view",
            detail: format!("installed view {target}, {} slots re-issued", pre_prepares.len()),
        });
        for pp in pre_prepares {
            match self.check_pre_prepare(&pp) {
                Ok(batch) => self.accept_pre_prepare(pp, batch, out),
                Err(reason) => self.reject(out, &pp, reason),
            }
        }

        let primary = self.primary(target);
        let proposals: Vec<(u64, Proposal)> = self
            .own_proposals
            .iter()
            .filter(|(seq, _)| !self.slot_committed(**seq))
            .map(|(s, p)| (*s, p.clone()))
            .collect();
        for (seq, prop) in proposals {
            let msg = self.signer.sign(target, seq, Payload::PrePropose(prop));
            out.push(Output::Send {
                to: Dest::To(primary),
                msg,
            });
        }
        let requests: Vec<(u64, Vec<u8>)> = self
            .own_requests
            .iter()
            .filter(|(seq, _)| !self.slot_committed(**seq))
            .map(|(s, r)| (*s, r.clone()))
            .collect();
        for (seq, req) in requests {
            let msg = self.signer.sign(target, seq, Payload::Request(req));
            out.push(Output::Send { to: Dest::All, msg });
        }

        let buffered = std::mem::take(&mut self.future);
        for (v, msgs) in buffered {
            if v == target {
                for m in msgs {
                    self.dispatch(m, out);
                }
            } else if v > target {
                self.future.entry(v).or_default().extend(msgs);
            }
        }
        if primary == self.cfg.id {
            let seqs: Vec<u64> = self.initial_proposals.keys().copied().collect();
            for seq in seqs {
                self.maybe_issue(seq, out);
            }
        }
        if self.waiting() {
            self.restart_timer(out);
        } else {
            self.timer_armed = false;
        }
    }
}
