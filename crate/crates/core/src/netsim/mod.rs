//! Deterministic discrete-event simulator for the partial-synchrony model.
//!
//! Virtual time is integer ticks. Before GST the adversary chooses delays
//! (and may drop); after GST every message arrives within `delta` ticks.

mod adversary;
mod sim;
mod trace;

pub use adversary::{AdversaryPolicy, Behavior};
pub use sim::{NetConfig, RunOutcome, SimStats, Simulator};
pub use trace::{Trace, TraceEvent, TraceLevel};

use std::fmt::Debug;

use rand::RngCore;
use thiserror::Error;

pub type NodeId = u32;
pub type Time = u64;

/// Largest f tolerated by n participants.
pub fn max_faults(n: usize) -> usize {
    n.saturating_sub(1) / 3
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("{requested} corrupt participants exceed f = {f} for n = {n}")]
    TooManyCorrupt { requested: usize, f: usize, n: usize },
    #[error("participant {id} out of range for n = {n}")]
    UnknownNode { id: NodeId, n: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("event budget of {budget} exhausted at t = {time} without reaching the stop condition")]
    Livelock { budget: u64, time: Time },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Dest {
    All,
    To(NodeId),
}

/// Payloads carried by the simulator.
pub trait WireMessage: Clone + Debug {
    /// One-line description for the trace.
    fn summary(&self) -> String;

    /// A mutated copy for the tampering adversary. Receivers are expected to
    /// reject it. `None` means the message has nothing worth mutating.
    fn tampered(&self, _rng: &mut dyn RngCore) -> Option<Self> {
        None
    }
}

pub(crate) enum Action<M> {
    Send { to: Dest, msg: M },
    Timer { id: u64, after: Time },
    Note { kind: &'static str, summary: String },
}

/// Handle passed to node callbacks. Everything a node does goes through here.
pub struct Context<'a, M> {
    now: Time,
    id: NodeId,
    n: usize,
    tracing: bool,
    actions: &'a mut Vec<Action<M>>,
}

impl<M> Context<'_, M> {
    pub fn now(&self) -> Time {
        self.now
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn send(&mut self, to: NodeId, msg: M) {
        self.actions.push(Action::Send { to: Dest::To(to), msg });
    }

    /// Sends to every participant including the caller.
    pub fn broadcast(&mut self, msg: M) {
        self.actions.push(Action::Send { to: Dest::All, msg });
    }

    pub fn dispatch(&mut self, to: Dest, msg: M) {
        self.actions.push(Action::Send { to, msg });
    }

    pub fn set_timer(&mut self, id: u64, after: Time) {
        self.actions.push(Action::Timer { id, after });
    }

    /// Records a node-level event in the trace. The closure only runs when
    /// tracing is on.
    pub fn note(&mut self, kind: &'static str, summary: impl FnOnce() -> String) {
        if self.tracing {
            self.actions.push(Action::Note {
                kind,
                summary: summary(),
            });
        }
    }
}

pub trait Node {
    type Msg: WireMessage;

    fn on_start(&mut self, _ctx: &mut Context<'_, Self::Msg>) {}

    fn on_message(&mut self, ctx: &mut Context<'_, Self::Msg>, from: NodeId, msg: Self::Msg);

    fn on_timer(&mut self, _ctx: &mut Context<'_, Self::Msg>, _id: u64) {}
}
