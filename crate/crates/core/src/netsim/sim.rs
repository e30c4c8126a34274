use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trace::{Trace, TraceLevel};
use super::{Action, AdversaryPolicy, Context, Dest, Node, NodeId, SimError, Time, WireMessage};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub gst: Time,
    /// Post-GST delay bound, at least 1.
    pub delta: Time,
    pub seed: u64,
    /// Maximum number of processed events before the run is declared a livelock.
    pub event_budget: u64,
    pub trace: TraceLevel,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            gst: 0,
            delta: 1,
            seed: 0,
            event_budget: 5_000_000,
            trace: TraceLevel::Off,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunOutcome {
    /// The stop predicate returned true.
    Stopped,
    /// No events left.
    Quiescent,
    /// The next event lies beyond the time limit.
    TimeLimit,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub events: u64,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub tampered: u64,
    pub timers: u64,
    /// Largest delivery latency among honest-to-honest messages sent at or
    /// after GST, self-delivery excluded.
    pub max_post_gst_latency: Time,
}

enum Event<M> {
    Deliver {
        src: NodeId,
        dst: NodeId,
        sent_at: Time,
        msg: M,
    },
    Timer {
        node: NodeId,
        id: u64,
    },
}

pub struct Simulator<N: Node> {
    config: NetConfig,
    adversary: AdversaryPolicy,
    nodes: Vec<N>,
    queue: BTreeMap<(Time, u64), Event<N::Msg>>,
    next_seq: u64,
    now: Time,
    rng: ChaCha8Rng,
    trace: Trace,
    stats: SimStats,
    started: bool,
    scratch: Vec<Action<N::Msg>>,
}

impl<N: Node> Simulator<N> {
    pub fn new(config: NetConfig, adversary: AdversaryPolicy, nodes: Vec<N>) -> Result<Self, SimError> {
        if nodes.len() != adversary.n() {
            return Err(SimError::Config(format!(
                "{} nodes supplied for an adversary over n = {}",
                nodes.len(),
                adversary.n()
            )));
        }
        if nodes.is_empty() {
            return Err(SimError::Config("no nodes".into()));
        }
        if config.delta == 0 {
            return Err(SimError::Config("delta must be at least 1 tick".into()));
        }
        adversary.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let trace = Trace::new(config.trace);
        Ok(Simulator {
            config,
            adversary,
            nodes,
            queue: BTreeMap::new(),
            next_seq: 0,
            now: 0,
            rng,
            trace,
            stats: SimStats::default(),
            started: false,
            scratch: Vec::new(),
        })
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn adversary(&self) -> &AdversaryPolicy {
        &self.adversary
    }

    pub fn nodes(&self) -> &[N] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &N {
        &self.nodes[id as usize]
    }

    pub fn into_nodes(self) -> Vec<N> {
        self.nodes
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn stats(&self) -> &SimStats {
        &self.stats
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    /// Runs until `stop` holds, the queue drains, or the next event is later
    /// than `until`. `stop` is checked after every event.
    pub fn run_until<F>(&mut self, until: Time, mut stop: F) -> Result<RunOutcome, SimError>
    where
        F: FnMut(&[N], Time) -> bool,
    {
        if !self.started {
            self.started = true;
            for id in 0..self.nodes.len() as NodeId {
                self.dispatch(id, |node, ctx| node.on_start(ctx));
            }
            if stop(&self.nodes, self.now) {
                return Ok(RunOutcome::Stopped);
            }
        }
        loop {
            let Some((&(at, _), _)) = self.queue.first_key_value() else {
                return Ok(RunOutcome::Quiescent);
            };
            if at > until {
                self.now = self.now.max(until);
                return Ok(RunOutcome::TimeLimit);
            }
            if self.stats.events >= self.config.event_budget {
                return Err(SimError::Livelock {
                    budget: self.config.event_budget,
                    time: self.now,
                });
            }
            let (_, event) = self.queue.pop_first().expect("peeked above");
            self.now = at;
            self.stats.events += 1;
            match event {
                Event::Deliver { src, dst, sent_at, msg } => {
                    self.stats.delivered += 1;
                    if src != dst
                        && sent_at >= self.config.gst
                        && self.adversary.is_honest(src)
                        && self.adversary.is_honest(dst)
                    {
                        self.stats.max_post_gst_latency = self.stats.max_post_gst_latency.max(at - sent_at);
                    }
                    self.trace.record(at, "deliver", Some(src), Some(dst), || msg.summary());
                    self.dispatch(dst, |node, ctx| node.on_message(ctx, src, msg));
                }
                Event::Timer { node, id } => {
                    self.trace
                        .record(at, "timer", Some(node), Some(node), || format!("timer {id}"));
                    self.dispatch(node, |n, ctx| n.on_timer(ctx, id));
                }
            }
            if stop(&self.nodes, self.now) {
                return Ok(RunOutcome::Stopped);
            }
        }
    }

    fn dispatch<F>(&mut self, id: NodeId, f: F)
    where
        F: FnOnce(&mut N, &mut Context<'_, N::Msg>),
    {
        let mut actions = std::mem::take(&mut self.scratch);
        {
            let mut ctx = Context {
                now: self.now,
                id,
                n: self.nodes.len(),
                tracing: self.trace.enabled(),
                actions: &mut actions,
            };
            f(&mut self.nodes[id as usize], &mut ctx);
        }
        for action in actions.drain(..) {
            match action {
                Action::Send { to: Dest::All, msg } => {
                    for dst in 0..self.nodes.len() as NodeId {
                        self.send(id, dst, msg.clone());
                    }
                }
                Action::Send { to: Dest::To(dst), msg } => {
                    if (dst as usize) < self.nodes.len() {
                        self.send(id, dst, msg);
                    }
                }
                Action::Timer { id: timer, after } => {
                    self.stats.timers += 1;
                    self.push(self.now + after, Event::Timer { node: id, id: timer });
                }
                Action::Note { kind, summary } => {
                    self.trace.record(self.now, kind, Some(id), None, || summary);
                }
            }
        }
        self.scratch = actions;
    }

    fn push(&mut self, at: Time, event: Event<N::Msg>) {
        self.queue.insert((at, self.next_seq), event);
        self.next_seq += 1;
    }

    fn send(&mut self, src: NodeId, dst: NodeId, msg: N::Msg) {
        self.stats.sent += 1;
        self.trace
            .record(self.now, "send", Some(src), Some(dst), || msg.summary());
        if src == dst {
            self.push(
                self.now,
                Event::Deliver {
                    src,
                    dst,
                    sent_at: self.now,
                    msg,
                },
            );
            return;
        }
        let duplicate = self.adversary.duplicate_prob > 0.0 && self.rng.gen_bool(self.adversary.duplicate_prob);
        if duplicate {
            self.stats.duplicated += 1;
            self.trace
                .record(self.now, "duplicate", Some(src), Some(dst), || msg.summary());
            self.schedule_copy(src, dst, msg.clone());
        }
        self.schedule_copy(src, dst, msg);
    }

    fn schedule_copy(&mut self, src: NodeId, dst: NodeId, msg: N::Msg) {
        let now = self.now;
        let NetConfig { gst, delta, .. } = self.config;
        let at = if now < gst {
            let isolated = self.adversary.isolate.contains(&src) || self.adversary.isolate.contains(&dst);
            let dropped = isolated || (self.adversary.drop_prob > 0.0 && self.rng.gen_bool(self.adversary.drop_prob));
            if dropped {
                self.stats.dropped += 1;
                self.trace.record(now, "drop", Some(src), Some(dst), || msg.summary());
                return;
            }
            self.rng.gen_range(now + 1..=gst + delta)
        } else {
            now + self.rng.gen_range(1..=delta)
        };
        let msg = if self.adversary.tamper_prob > 0.0 && self.rng.gen_bool(self.adversary.tamper_prob) {
            match msg.tampered(&mut self.rng) {
                Some(bad) => {
                    self.stats.tampered += 1;
                    self.trace.record(now, "tamper", Some(src), Some(dst), || bad.summary());
                    bad
                }
                None => msg,
            }
        } else {
            msg
        };
        self.push(
            at,
            Event::Deliver {
                src,
                dst,
                sent_at: now,
                msg,
            },
        );
    }
}
