//! The consensus-gated workflow. Round t (1-indexed) uses three slots:
//! - 3(t-1): one REQUEST per dealer with its commitments and one ciphertext
//!   per recipient;
//! - 3(t-1)+1: one REQUEST per participant listing the dealers whose share
//!   verified against the commitments committed in the previous slot;
//! - 3(t-1)+2: one REQUEST per participant carrying its summed share over
//!   the dealers with at least th votes.
//!
//! Every decision is taken from committed batches only, so honest
//! participants agree on the dealer set and on the reconstructed model.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::baseline::Outcome;
use super::crypto::{Encryption, KeyPair};
use super::{model, AttackRecord, DpmlError, NodeRound, Setup};
use crate::attack::{self, AttackerMove};
use crate::consensus::{Batch, ConsensusMessage, Keyring, Output, Payload, Replica, ReplicaConfig};
use crate::field::bytes::{self, Reader};
use crate::netsim::{AdversaryPolicy, Context, NetConfig, Node, NodeId, Simulator, Time, Trace, TraceLevel};
use crate::vss::{self, CommitmentVector, ShareBundle, AGGREGATE_DEALER};

const DEAL: u8 = 0;
const VOTES: u8 = 1;
const AGGREGATE: u8 = 2;

pub(crate) fn slot(round: usize, phase: u64) -> u64 {
    3 * (round as u64 - 1) + phase
}

fn encode_deal(round: usize, dealer: NodeId, commitments: &CommitmentVector, cts: &[Vec<u8>]) -> Vec<u8> {
    let mut out = vec![DEAL];
    bytes::put_u64(&mut out, round as u64);
    bytes::put_u32(&mut out, dealer);
    bytes::put_bytes(&mut out, &commitments.to_bytes());
    bytes::put_u32(&mut out, cts.len() as u32);
    for ct in cts {
        bytes::put_bytes(&mut out, ct);
    }
    out
}

struct DealRequest<'a> {
    round: usize,
    dealer: NodeId,
    commitments: &'a [u8],
    ciphertexts: Vec<&'a [u8]>,
}

fn decode_deal(raw: &[u8]) -> Option<DealRequest<'_>> {
    let mut r = Reader::new(raw);
    if r.u8().ok()? != DEAL {
        return None;
    }
    let round = r.u64().ok()? as usize;
    let dealer = r.u32().ok()?;
    let commitments = r.bytes().ok()?;
    let count = r.u32().ok()? as usize;
    let ciphertexts = (0..count).map(|_| r.bytes().ok()).collect::<Option<Vec<_>>>()?;
    r.finish().ok()?;
    Some(DealRequest {
        round,
        dealer,
        commitments,
        ciphertexts,
    })
}

fn encode_votes(round: usize, voter: NodeId, dealers: &BTreeSet<NodeId>) -> Vec<u8> {
    let mut out = vec![VOTES];
    bytes::put_u64(&mut out, round as u64);
    bytes::put_u32(&mut out, voter);
    bytes::put_u32(&mut out, dealers.len() as u32);
    for d in dealers {
        bytes::put_u32(&mut out, *d);
    }
    out
}

fn decode_votes(raw: &[u8]) -> Option<(usize, NodeId, BTreeSet<NodeId>)> {
    let mut r = Reader::new(raw);
    if r.u8().ok()? != VOTES {
        return None;
    }
    let round = r.u64().ok()? as usize;
    let voter = r.u32().ok()?;
    let count = r.u32().ok()? as usize;
    let dealers = (0..count).map(|_| r.u32().ok()).collect::<Option<BTreeSet<_>>>()?;
    r.finish().ok()?;
    Some((round, voter, dealers))
}

fn encode_aggregate(round: usize, sender: NodeId, bundle: &ShareBundle) -> Vec<u8> {
    let mut out = vec![AGGREGATE];
    bytes::put_u64(&mut out, round as u64);
    bytes::put_u32(&mut out, sender);
    bytes::put_bytes(&mut out, &bundle.to_bytes());
    out
}

fn decode_aggregate(raw: &[u8]) -> Option<(usize, NodeId, &[u8])> {
    let mut r = Reader::new(raw);
    if r.u8().ok()? != AGGREGATE {
        return None;
    }
    let round = r.u64().ok()? as usize;
    let sender = r.u32().ok()?;
    let bundle = r.bytes().ok()?;
    r.finish().ok()?;
    Some((round, sender, bundle))
}

/// Requests of a committed batch, keyed by sender. A sender with more than
/// one request in the same slot is dropped entirely.
fn by_sender(batch: &Batch) -> (BTreeMap<NodeId, &[u8]>, BTreeSet<NodeId>) {
    let mut seen: BTreeMap<NodeId, &[u8]> = BTreeMap::new();
    let mut dup = BTreeSet::new();
    for (s, r) in batch.requests() {
        if seen.insert(*s, r).is_some() {
            dup.insert(*s);
        }
    }
    for d in &dup {
        seen.remove(d);
    }
    (seen, dup)
}

#[derive(Default)]
struct RoundState {
    /// Dealers whose deal made it into the committed batch.
    dealt: BTreeSet<NodeId>,
    /// This participant's verified shares.
    shares: BTreeMap<NodeId, ShareBundle>,
    chosen: Vec<NodeId>,
    aggregate: Option<ShareBundle>,
}

struct AttackerState {
    /// Current-round shares this node could decrypt, per dealer point.
    observed: BTreeMap<u32, (CommitmentVector, Vec<ShareBundle>)>,
    last_reason: Option<String>,
    submitted: bool,
    /// Deals for rounds this node has not reached yet.
    early: Vec<ConsensusMessage>,
    records: Vec<AttackRecord>,
}

pub(crate) struct GatedNode<'s> {
    setup: &'s Setup,
    enc: &'s dyn Encryption,
    public_keys: &'s [Vec<u8>],
    keys: KeyPair,
    id: NodeId,
    replica: Replica,
    w: Vec<f64>,
    round: usize,
    started_at: Time,
    state: RoundState,
    executed: BTreeMap<u64, Batch>,
    next_slot: u64,
    history: Vec<NodeRound>,
    rng: ChaCha8Rng,
    attacker: Option<AttackerState>,
    error: Option<DpmlError>,
}

impl<'s> GatedNode<'s> {
    fn done(&self) -> bool {
        self.round > self.setup.cfg.rounds
    }

    fn deal_request(&mut self, vector: &[f64]) -> Result<Vec<u8>, DpmlError> {
        let s = self.setup;
        let dealing = vss::share(
            vector,
            Setup::point(self.id),
            s.cfg.th,
            s.cfg.n,
            &s.group,
            &s.codec,
            &mut self.rng,
        )?;
        let cts = dealing
            .bundles
            .iter()
            .zip(self.public_keys)
            .map(|(b, pk)| self.enc.encrypt(pk, &b.to_bytes(), &mut self.rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(encode_deal(self.round, self.id, &dealing.commitments, &cts))
    }

    fn start_round(&mut self, ctx: &mut Context<'_, ConsensusMessage>) -> Result<(), DpmlError> {
        if self.done() {
            return Ok(());
        }
        self.started_at = ctx.now();
        self.state = RoundState::default();
        if let Some(a) = &mut self.attacker {
            a.observed.clear();
            a.last_reason = None;
            a.submitted = false;
            for msg in std::mem::take(&mut a.early) {
                self.observe(ctx, &msg)?;
            }
            return Ok(());
        }
        let s = self.setup;
        let local = model::local_train(&self.w, &s.data[self.id as usize], s.cfg.learning_rate);
        let req = self.deal_request(&local)?;
        let out = self.replica.broadcast_update(slot(self.round, 0), req);
        self.apply(ctx, out)
    }

    fn apply(&mut self, ctx: &mut Context<'_, ConsensusMessage>, outputs: Vec<Output>) -> Result<(), DpmlError> {
        let mut queue: VecDeque<Output> = outputs.into();
        while let Some(o) = queue.pop_front() {
            match o {
                Output::Send { to, msg } => ctx.dispatch(to, msg),
                Output::SetTimer { id, after } => ctx.set_timer(id, after),
                Output::Note { kind, detail } => ctx.note(kind, || detail),
                Output::Execute(e) => {
                    self.executed.insert(e.seq, e.batch);
                    while let Some(batch) = self.executed.remove(&self.next_slot) {
                        let seq = self.next_slot;
                        self.next_slot += 1;
                        queue.extend(self.process(ctx, seq, &batch)?);
                    }
                }
            }
        }
        Ok(())
    }

    fn process(
        &mut self,
        ctx: &mut Context<'_, ConsensusMessage>,
        seq: u64,
        batch: &Batch,
    ) -> Result<Vec<Output>, DpmlError> {
        let round = (seq / 3) as usize + 1;
        if round != self.round {
            return Ok(Vec::new());
        }
        let (requests, dup) = by_sender(batch);
        if !dup.is_empty() {
            ctx.note("duplicate-requests", || format!("sq={seq} senders={dup:?}"));
        }
        match seq % 3 {
            0 => self.verify_deals(ctx, &requests),
            1 => self.choose_dealers(ctx, &requests),
            _ => self.reconstruct(ctx, &requests),
        }
    }

    /// Opens this participant's ciphertext from one deal and checks it
    /// against the deal's own commitments.
    fn open_share(
        &self,
        dealer: NodeId,
        deal: &DealRequest<'_>,
        index: usize,
    ) -> Option<(CommitmentVector, ShareBundle)> {
        let s = self.setup;
        let commitments = CommitmentVector::from_bytes(deal.commitments, &s.group).ok()?;
        if commitments.dealer != Setup::point(dealer)
            || commitments.threshold() != s.cfg.th
            || commitments.dimension() != s.cfg.data.dimension
        {
            return None;
        }
        let plain = self.enc.decrypt(&self.keys.secret, deal.ciphertexts.get(index)?).ok()?;
        let bundle = ShareBundle::from_bytes(&plain, s.codec.field()).ok()?;
        if bundle.dealer != Setup::point(dealer) || bundle.recipient != Setup::point(index as NodeId) {
            return None;
        }
        Some((commitments, bundle))
    }

    fn verify_deals(
        &mut self,
        ctx: &mut Context<'_, ConsensusMessage>,
        requests: &BTreeMap<NodeId, &[u8]>,
    ) -> Result<Vec<Output>, DpmlError> {
        let s = self.setup;
        let mut verified = BTreeSet::new();
        for (&sender, raw) in requests {
            let Some(deal) = decode_deal(raw) else {
                continue;
            };
            if deal.round != self.round || deal.dealer != sender || deal.ciphertexts.len() != s.cfg.n {
                continue;
            }
            self.state.dealt.insert(sender);
            let ok = self
                .open_share(sender, &deal, self.id as usize)
                .filter(|(c, b)| matches!(vss::verify(b, c, &s.group), Ok(true)));
            match ok {
                Some((_, bundle)) => {
                    verified.insert(sender);
                    self.state.shares.insert(sender, bundle);
                }
                None => ctx.note("share-verify-failed", || {
                    format!("round={} dealer={sender}", self.round)
                }),
            }
        }
        let mut out = Vec::new();
        if let Some(a) = &mut self.attacker {
            if !a.submitted {
                // The slot closed before the precondition held: the stale
                // craft goes out too late to be ordered.
                a.submitted = true;
                let reason = a
                    .last_reason
                    .clone()
                    .unwrap_or_else(|| "no current-round shares readable".into());
                let round = self.round;
                ctx.note("acumpa", || format!("round={round} adaptive=false fallback: {reason}"));
                let stale = attack::asdp_craft(&self.w, &s.cfg.asdp).ok().map(|c| c.vector);
                let mut record = AttackRecord {
                    attacker: self.id,
                    round,
                    adaptive: false,
                    fallback: true,
                    reason: Some(reason),
                    submitted_at: None,
                    cos_to_honest: None,
                    hit_threshold: None,
                    included: false,
                };
                if let Some(v) = stale {
                    record.submitted_at = Some(ctx.now());
                    let req = self.deal_request(&v)?;
                    out.extend(self.replica.broadcast_update(slot(round, 0), req));
                }
                self.attacker.as_mut().expect("attacker").records.push(record);
            }
        }
        out.extend(
            self.replica
                .broadcast_update(slot(self.round, 1), encode_votes(self.round, self.id, &verified)),
        );
        Ok(out)
    }

    fn choose_dealers(
        &mut self,
        ctx: &mut Context<'_, ConsensusMessage>,
        requests: &BTreeMap<NodeId, &[u8]>,
    ) -> Result<Vec<Output>, DpmlError> {
        let th = self.setup.cfg.th;
        let mut votes: BTreeMap<NodeId, usize> = BTreeMap::new();
        for (&sender, raw) in requests {
            let Some((round, voter, dealers)) = decode_votes(raw) else {
                continue;
            };
            if round != self.round || voter != sender {
                continue;
            }
            for d in dealers.intersection(&self.state.dealt) {
                *votes.entry(*d).or_default() += 1;
            }
        }
        let chosen: Vec<NodeId> = votes.into_iter().filter(|&(_, c)| c >= th).map(|(d, _)| d).collect();
        if chosen.is_empty() {
            return Err(DpmlError::Stall {
                round: self.round,
                reason: "no dealer collected th verification votes".into(),
            });
        }
        let round = self.round;
        ctx.note("dealer-set", || format!("round={round} S={chosen:?}"));
        let mine: Option<Vec<ShareBundle>> = chosen.iter().map(|d| self.state.shares.get(d).cloned()).collect();
        self.state.chosen = chosen;
        let Some(mine) = mine else {
            // Missing a valid share from a chosen dealer: sit this slot out
            // and rely on the others' sums.
            ctx.note("aggregate-abstain", || format!("round={round}"));
            return Ok(Vec::new());
        };
        let agg = vss::sum_shares(&mine, self.setup.codec.field())?;
        let req = encode_aggregate(self.round, self.id, &agg);
        self.state.aggregate = Some(agg);
        Ok(self.replica.broadcast_update(slot(self.round, 2), req))
    }

    fn reconstruct(
        &mut self,
        ctx: &mut Context<'_, ConsensusMessage>,
        requests: &BTreeMap<NodeId, &[u8]>,
    ) -> Result<Vec<Output>, DpmlError> {
        let s = self.setup;
        let th = s.cfg.th;
        let mut shares: Vec<ShareBundle> = self.state.aggregate.iter().cloned().collect();
        for (&sender, raw) in requests {
            if shares.len() >= th {
                break;
            }
            if sender == self.id {
                continue;
            }
            let Some((round, from, body)) = decode_aggregate(raw) else {
                continue;
            };
            if round != self.round || from != sender {
                continue;
            }
            let Ok(b) = ShareBundle::from_bytes(body, s.codec.field()) else {
                continue;
            };
            if b.dealer == AGGREGATE_DEALER
                && b.recipient == Setup::point(sender)
                && b.dimension() == s.cfg.data.dimension
            {
                shares.push(b);
            }
        }
        if shares.len() < th {
            return Err(DpmlError::Stall {
                round: self.round,
                reason: format!("{} of {th} aggregated shares committed", shares.len()),
            });
        }
        let sum = vss::reconstruct(&shares, th, &s.codec)?;
        let k = self.state.chosen.len() as f64;
        let w: Vec<f64> = sum.iter().map(|x| x / k).collect();
        let round = self.round;
        ctx.note("model", || format!("round={round} |S|={}", self.state.chosen.len()));
        self.history.push(NodeRound {
            w: w.clone(),
            dealers: std::mem::take(&mut self.state.chosen),
            dealer_cosines: BTreeMap::new(),
            started_at: self.started_at,
            finished_at: ctx.now(),
        });
        self.w = w;
        self.round += 1;
        self.start_round(ctx)?;
        Ok(Vec::new())
    }

    /// Collects whatever current-round shares the attacker can read from a
    /// REQUEST it was sent, and crafts as soon as every honest dealer can be
    /// reconstructed.
    fn observe(&mut self, ctx: &mut Context<'_, ConsensusMessage>, msg: &ConsensusMessage) -> Result<(), DpmlError> {
        let s = self.setup;
        let Payload::Request(raw) = &msg.payload else {
            return Ok(());
        };
        if self.done() || !msg.seq.is_multiple_of(3) || msg.seq < slot(self.round, 0) || msg.sender == self.id {
            return Ok(());
        }
        if msg.seq > slot(self.round, 0) {
            self.attacker.as_mut().expect("attacker").early.push(msg.clone());
            return Ok(());
        }
        let Some(deal) = decode_deal(raw) else {
            return Ok(());
        };
        if deal.round != self.round || deal.dealer != msg.sender || deal.ciphertexts.len() != s.cfg.n {
            return Ok(());
        }
        let mut readable = Vec::new();
        let mut commitments = None;
        for index in 0..s.cfg.n {
            if let Some((c, b)) = self.open_share(msg.sender, &deal, index) {
                commitments.get_or_insert(c);
                readable.push(b);
            }
        }
        let state = self.attacker.as_mut().expect("attacker");
        if state.submitted {
            return Ok(());
        }
        if let Some(c) = commitments {
            state.observed.insert(Setup::point(msg.sender), (c, readable));
        }
        let expected: Vec<u32> = s.cfg.honest().iter().map(|&h| Setup::point(h)).collect();
        match attack::acumpa_step(&state.observed, &expected, s.cfg.th, &s.group, &s.codec, &s.cfg.asdp)? {
            AttackerMove::Fallback { reason } => {
                state.last_reason = Some(reason);
                Ok(())
            }
            AttackerMove::Adaptive {
                honest_average,
                crafted,
            } => {
                state.submitted = true;
                let round = self.round;
                let cos = attack::cosine(&crafted.vector, &honest_average).ok();
                ctx.note("acumpa", || format!("round={round} adaptive=true cos={cos:?}"));
                state.records.push(AttackRecord {
                    attacker: self.id,
                    round,
                    adaptive: true,
                    fallback: false,
                    reason: None,
                    submitted_at: Some(ctx.now()),
                    cos_to_honest: cos,
                    hit_threshold: Some(crafted.hit_threshold),
                    included: false,
                });
                let req = self.deal_request(&crafted.vector)?;
                let out = self.replica.broadcast_update(slot(round, 0), req);
                self.apply(ctx, out)
            }
        }
    }

    fn guard(&mut self, r: Result<(), DpmlError>) {
        if let Err(e) = r {
            self.error.get_or_insert(e);
        }
    }
}

impl Node for GatedNode<'_> {
    type Msg = ConsensusMessage;

    fn on_start(&mut self, ctx: &mut Context<'_, ConsensusMessage>) {
        let r = self.start_round(ctx);
        self.guard(r);
    }

    fn on_message(&mut self, ctx: &mut Context<'_, ConsensusMessage>, _from: NodeId, msg: ConsensusMessage) {
        if self.error.is_some() {
            return;
        }
        if self.attacker.is_some() {
            let r = self.observe(ctx, &msg);
            self.guard(r);
        }
        let out = self.replica.handle(msg);
        let r = self.apply(ctx, out);
        self.guard(r);
    }

    fn on_timer(&mut self, ctx: &mut Context<'_, ConsensusMessage>, id: u64) {
        if self.error.is_some() {
            return;
        }
        let out = self.replica.on_timer(id);
        let r = self.apply(ctx, out);
        self.guard(r);
    }
}

pub(crate) fn run(setup: &Setup, level: TraceLevel) -> Result<(Outcome, Trace), DpmlError> {
    let cfg = &setup.cfg;
    let attackers = cfg.active_attackers();
    let mut adversary = AdversaryPolicy::new(cfg.n);
    for &a in &attackers {
        adversary.corrupt(a)?;
    }
    let enc = cfg.encryption.build(&setup.group);
    let keys: Vec<KeyPair> = (0..cfg.n as u64)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(2000 + id);
            enc.keygen(&mut rng)
        })
        .collect();
    let public_keys: Vec<Vec<u8>> = keys.iter().map(|k| k.public.clone()).collect();
    let ring = Keyring::generate(cfg.n, cfg.seed);
    let mut nodes = Vec::with_capacity(cfg.n);
    for id in 0..cfg.n as NodeId {
        let mut rc = ReplicaConfig::new(id, cfg.n, cfg.delta);
        rc.batch_size = cfg.effective_batch_size();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1000 + id as u64);
        nodes.push(GatedNode {
            setup,
            enc: enc.as_ref(),
            public_keys: &public_keys,
            keys: keys[id as usize].clone(),
            id,
            replica: Replica::new(rc, ring.signer(id), ring.verifier())?,
            w: setup.init.clone(),
            round: 1,
            started_at: 0,
            state: RoundState::default(),
            executed: BTreeMap::new(),
            next_slot: 0,
            history: Vec::new(),
            rng,
            attacker: attackers.contains(&id).then(|| AttackerState {
                observed: BTreeMap::new(),
                last_reason: None,
                submitted: false,
                early: Vec::new(),
                records: Vec::new(),
            }),
            error: None,
        });
    }
    let net = NetConfig {
        gst: cfg.gst,
        delta: cfg.delta,
        seed: cfg.seed,
        trace: level,
        ..NetConfig::default()
    };
    let honest = cfg.honest();
    let mut sim = Simulator::new(net, adversary, nodes)?;
    sim.run_until(cfg.time_limit(), |nodes, _| {
        honest.iter().any(|&h| nodes[h as usize].error.is_some()) || honest.iter().all(|&h| nodes[h as usize].done())
    })?;
    let end = sim.now();
    let trace = sim.trace().clone();
    let mut nodes = sim.into_nodes();
    if let Some(e) = honest.iter().find_map(|&h| nodes[h as usize].error.take()) {
        return Err(e);
    }
    let mut views = BTreeMap::new();
    for &h in &honest {
        let node = &mut nodes[h as usize];
        if !node.done() {
            return Err(DpmlError::Stall {
                round: node.round,
                reason: format!("participant {h} did not finish before the time limit"),
            });
        }
        views.insert(h, std::mem::take(&mut node.history));
    }
    let attacks = nodes
        .iter_mut()
        .filter_map(|n| n.attacker.take())
        .flat_map(|a| a.records)
        .collect();
    Ok(((views, attacks, Some(end)), trace))
}
