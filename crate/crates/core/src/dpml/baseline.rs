//! Independent verification: each dealer broadcasts all of its shares and
//! commitments, and every participant verifies, reconstructs and averages on
//! its own once at least n-f dealers check out.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{model, AttackRecord, DpmlError, NodeRound, Setup};
use crate::attack::{self, AttackerMove};
use crate::netsim::{
    AdversaryPolicy, Context, NetConfig, Node, NodeId, Simulator, Time, Trace, TraceLevel, WireMessage,
};
use crate::vss::{self, CommitmentVector, ShareBundle};

#[derive(Clone, Debug)]
pub(crate) struct Deal {
    round: usize,
    dealer: NodeId,
    commitments: CommitmentVector,
    bundles: Vec<ShareBundle>,
}

impl WireMessage for Deal {
    fn summary(&self) -> String {
        format!(
            "deal round={} dealer={} shares={}",
            self.round,
            self.dealer,
            self.bundles.len()
        )
    }
}

struct AttackerState {
    stale: Option<Vec<f64>>,
    records: Vec<AttackRecord>,
}

pub(crate) struct BaselineNode<'s> {
    setup: &'s Setup,
    id: NodeId,
    w: Vec<f64>,
    round: usize,
    started_at: Time,
    expired: bool,
    deals: BTreeMap<usize, BTreeMap<NodeId, Deal>>,
    history: Vec<NodeRound>,
    rng: ChaCha8Rng,
    attacker: Option<AttackerState>,
    error: Option<DpmlError>,
}

impl<'s> BaselineNode<'s> {
    fn new(setup: &'s Setup, id: NodeId, attacker: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(setup.cfg.seed);
        rng.set_stream(1000 + id as u64);
        BaselineNode {
            setup,
            id,
            w: setup.init.clone(),
            round: 1,
            started_at: 0,
            expired: false,
            deals: BTreeMap::new(),
            history: Vec::new(),
            rng,
            attacker: attacker.then(|| AttackerState {
                stale: None,
                records: Vec::new(),
            }),
            error: None,
        }
    }

    fn done(&self) -> bool {
        self.round > self.setup.cfg.rounds
    }

    fn deal(&mut self, ctx: &mut Context<'_, Deal>, vector: &[f64]) -> Result<(), DpmlError> {
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
        ctx.broadcast(Deal {
            round: self.round,
            dealer: self.id,
            commitments: dealing.commitments,
            bundles: dealing.bundles,
        });
        Ok(())
    }

    fn start_round(&mut self, ctx: &mut Context<'_, Deal>) -> Result<(), DpmlError> {
        if self.done() {
            return Ok(());
        }
        let s = self.setup;
        self.started_at = ctx.now();
        self.expired = false;
        let local = model::local_train(&self.w, &s.data[self.id as usize], s.cfg.learning_rate);
        self.deal(ctx, &local)?;
        ctx.set_timer(self.round as u64, s.cfg.effective_round_timeout());
        self.try_finish(ctx)
    }

    /// Reconstructs one dealer's vector if at least th of its shares verify.
    fn open(&self, deal: &Deal) -> Result<Option<Vec<f64>>, DpmlError> {
        let s = self.setup;
        let valid: Vec<ShareBundle> = deal
            .bundles
            .iter()
            .filter(|b| matches!(vss::verify(b, &deal.commitments, &s.group), Ok(true)))
            .cloned()
            .collect();
        if valid.len() < s.cfg.th {
            return Ok(None);
        }
        Ok(Some(vss::reconstruct(&valid, s.cfg.th, &s.codec)?))
    }

    fn try_finish(&mut self, ctx: &mut Context<'_, Deal>) -> Result<(), DpmlError> {
        let cfg = &self.setup.cfg;
        let Some(deals) = self.deals.get(&self.round) else {
            return Ok(());
        };
        if !self.expired && deals.len() < cfg.n {
            return Ok(());
        }
        let reference = self.history.last().map(|r| r.w.clone());
        let mut accepted = BTreeMap::new();
        let mut cosines = BTreeMap::new();
        for (dealer, deal) in deals {
            let Some(v) = self.open(deal)? else {
                ctx.note("share-verify-failed", || format!("dealer {dealer}"));
                continue;
            };
            if let Some(prev) = &reference {
                let verdict = attack::defense_cosine_check(&v, prev, cfg.defense_bound.unwrap_or(-1.0));
                if let attack::DefenseVerdict::Accept { cos } | attack::DefenseVerdict::Reject { cos: Some(cos), .. } =
                    verdict
                {
                    cosines.insert(*dealer, cos);
                }
                if cfg.defense_bound.is_some() && !verdict.accepted() {
                    ctx.note("defense-reject", || format!("dealer {dealer}"));
                    continue;
                }
            }
            accepted.insert(*dealer, v);
        }
        if accepted.len() < cfg.n - cfg.f {
            if self.expired {
                // Keep waiting; a late dealer may still arrive.
                self.expired = false;
                ctx.set_timer(self.round as u64, cfg.effective_round_timeout());
            }
            return Ok(());
        }
        let k = accepted.len() as f64;
        let mut w = vec![0.0; self.w.len()];
        for v in accepted.values() {
            w.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        }
        w.iter_mut().for_each(|a| *a /= k);
        ctx.note("aggregate", || {
            format!("round={} dealers={:?}", self.round, accepted.keys().collect::<Vec<_>>())
        });
        self.history.push(NodeRound {
            w: w.clone(),
            dealers: accepted.keys().copied().collect(),
            dealer_cosines: cosines,
            started_at: self.started_at,
            finished_at: ctx.now(),
        });
        self.w = w;
        self.deals.remove(&self.round);
        self.round += 1;
        self.start_round(ctx)
    }

    /// The attacker holds back until every honest deal of its current round
    /// is readable, then submits a crafted vector.
    fn try_attack(&mut self, ctx: &mut Context<'_, Deal>) -> Result<(), DpmlError> {
        let s = self.setup;
        let honest = s.cfg.honest();
        while !self.done() {
            let Some(deals) = self.deals.get(&self.round) else {
                return Ok(());
            };
            if !honest.iter().all(|h| deals.contains_key(h)) {
                return Ok(());
            }
            let observed: BTreeMap<u32, (CommitmentVector, Vec<ShareBundle>)> = deals
                .values()
                .map(|d| (Setup::point(d.dealer), (d.commitments.clone(), d.bundles.clone())))
                .collect();
            let expected: Vec<u32> = honest.iter().map(|&h| Setup::point(h)).collect();
            let mv = attack::acumpa_step(&observed, &expected, s.cfg.th, &s.group, &s.codec, &s.cfg.asdp);
            let state = self.attacker.as_mut().expect("attacker state");
            let mut record = AttackRecord {
                attacker: self.id,
                round: self.round,
                adaptive: false,
                fallback: false,
                reason: None,
                submitted_at: None,
                cos_to_honest: None,
                hit_threshold: None,
                included: false,
            };
            let vector = match mv {
                Ok(AttackerMove::Adaptive {
                    honest_average,
                    crafted,
                }) => {
                    record.adaptive = true;
                    record.cos_to_honest = attack::cosine(&crafted.vector, &honest_average).ok();
                    record.hit_threshold = Some(crafted.hit_threshold);
                    state.stale = Some(crafted.vector.clone());
                    Some(crafted.vector)
                }
                Ok(AttackerMove::Fallback { reason }) => {
                    record.fallback = true;
                    record.reason = Some(reason);
                    state.stale.clone()
                }
                Err(e) => {
                    record.fallback = true;
                    record.reason = Some(e.to_string());
                    state.stale.clone()
                }
            };
            ctx.note("acumpa", || {
                format!(
                    "round={} adaptive={} cos={:?}",
                    record.round, record.adaptive, record.cos_to_honest
                )
            });
            if let Some(v) = vector {
                record.submitted_at = Some(ctx.now());
                self.deal(ctx, &v)?;
            }
            self.attacker.as_mut().expect("attacker state").records.push(record);
            self.deals.remove(&self.round);
            self.round += 1;
        }
        Ok(())
    }

    fn guard(&mut self, r: Result<(), DpmlError>) {
        if let Err(e) = r {
            self.error.get_or_insert(e);
        }
    }
}

impl Node for BaselineNode<'_> {
    type Msg = Deal;

    fn on_start(&mut self, ctx: &mut Context<'_, Deal>) {
        if self.attacker.is_none() {
            let r = self.start_round(ctx);
            self.guard(r);
        }
    }

    fn on_message(&mut self, ctx: &mut Context<'_, Deal>, from: NodeId, msg: Deal) {
        let cfg = &self.setup.cfg;
        if self.error.is_some() || msg.dealer != from || msg.round < self.round || msg.round > cfg.rounds {
            return;
        }
        if msg.bundles.len() != cfg.n || msg.commitments.dealer != Setup::point(from) {
            ctx.note("malformed-deal", || format!("from {from}"));
            return;
        }
        self.deals.entry(msg.round).or_default().entry(from).or_insert(msg);
        let r = if self.attacker.is_some() {
            self.try_attack(ctx)
        } else {
            self.try_finish(ctx)
        };
        self.guard(r);
    }

    fn on_timer(&mut self, ctx: &mut Context<'_, Deal>, id: u64) {
        if self.attacker.is_none() && self.error.is_none() && id == self.round as u64 {
            self.expired = true;
            let r = self.try_finish(ctx);
            self.guard(r);
        }
    }
}

pub(crate) type Outcome = (BTreeMap<NodeId, Vec<NodeRound>>, Vec<AttackRecord>, Option<Time>);

pub(crate) fn run(setup: &Setup, level: TraceLevel) -> Result<(Outcome, Trace), DpmlError> {
    let cfg = &setup.cfg;
    let attackers = cfg.active_attackers();
    let mut adversary = AdversaryPolicy::new(cfg.n);
    for &a in &attackers {
        adversary.corrupt(a)?;
    }
    let nodes: Vec<BaselineNode> = (0..cfg.n as NodeId)
        .map(|id| BaselineNode::new(setup, id, attackers.contains(&id)))
        .collect();
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
        nodes.iter().any(|n| n.error.is_some()) || honest.iter().all(|&h| nodes[h as usize].done())
    })?;
    let end = sim.now();
    let trace = sim.trace().clone();
    let mut nodes = sim.into_nodes();
    if let Some(e) = nodes.iter_mut().find_map(|n| n.error.take()) {
        return Err(e);
    }
    let mut views = BTreeMap::new();
    for &h in &honest {
        let node = &mut nodes[h as usize];
        if !node.done() {
            return Err(DpmlError::Stall {
                round: node.round,
                reason: format!("participant {h} never gathered n-f valid dealers"),
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
