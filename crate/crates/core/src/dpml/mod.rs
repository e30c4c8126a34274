//! Distributed training over secret-shared models.
//!
//! Four workflows share one toy task:
//! - `fedavg-plain`: every participant's update averaged in the clear.
//! - `baseline-vss`: dealers broadcast Feldman shares and commitments with no
//!   ordering; every participant reconstructs each dealer on its own.
//! - `ebyftves`: shares travel encrypted inside consensus slots 3t, 3t+1 and
//!   3t+2 (deals, verification votes, aggregated shares).
//! - the `+acumpa` variants add the share-delay attacker.

mod baseline;
pub mod crypto;
mod gated;
pub mod metrics;
pub mod model;
mod plain;

pub use crypto::{CryptoError, Encryption, EncryptionKind, HybridElGamal, IdentityEncryption, KeyPair};
pub use metrics::{inference_time, mean_std, median, AttackRecord, InferenceTime, RoundMetrics};
pub use model::{accuracy, gradient, local_train, loss, Dataset, DatasetSpec};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{AsdpParams, AttackError};
use crate::consensus::ConsensusError;
use crate::field::{FieldError, FixedPointCodec, GroupParams};
use crate::netsim::{max_faults, NodeId, SimError, Time, Trace, TraceLevel};
use crate::vss::VssError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpmlError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("round {round} stalled: {reason}")]
    Stall { round: usize, reason: String },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Vss(#[from] VssError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "fedavg-plain")]
    FedavgPlain,
    #[serde(rename = "baseline-vss")]
    BaselineVss,
    #[serde(rename = "baseline-vss+acumpa")]
    BaselineVssAcumpa,
    #[serde(rename = "ebyftves")]
    Ebyftves,
    #[serde(rename = "ebyftves+acumpa")]
    EbyftvesAcumpa,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::FedavgPlain,
        Mode::BaselineVss,
        Mode::BaselineVssAcumpa,
        Mode::Ebyftves,
        Mode::EbyftvesAcumpa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::FedavgPlain => "fedavg-plain",
            Mode::BaselineVss => "baseline-vss",
            Mode::BaselineVssAcumpa => "baseline-vss+acumpa",
            Mode::Ebyftves => "ebyftves",
            Mode::EbyftvesAcumpa => "ebyftves+acumpa",
        }
    }

    /// Whether the configured attackers actually attack. In the other modes
    /// they train honestly.
    pub fn attacks(self) -> bool {
        matches!(self, Mode::BaselineVssAcumpa | Mode::EbyftvesAcumpa)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
            format!("unknown mode {s:?}; expected one of {}", names.join(", "))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupSpec {
    pub p_bits: u64,
    pub q_bits: u64,
    pub seed: u64,
}

impl Default for GroupSpec {
    fn default() -> Self {
        GroupSpec {
            p_bits: 128,
            q_bits: 64,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub n: usize,
    pub f: usize,
    pub th: usize,
    pub rounds: usize,
    /// Training stops once the mean local cross-entropy reaches this.
    pub error_threshold: f64,
    pub learning_rate: f64,
    pub data: DatasetSpec,
    pub mode: Mode,
    pub attackers: BTreeSet<NodeId>,
    pub asdp: AsdpParams,
    /// Accuracy target for the inference-time metric.
    pub tau: f64,
    /// Minimum cosine against the previous aggregate for a dealer's vector
    /// to be aggregated in the baseline workflow. `None` disables the check.
    pub defense_bound: Option<f64>,
    pub group: GroupSpec,
    pub encryption: EncryptionKind,
    pub delta: Time,
    pub gst: Time,
    /// Consensus batch trigger; defaults to n without attackers and 2f+1
    /// otherwise.
    pub batch_size: Option<usize>,
    /// Baseline participants aggregate without the missing dealers once this
    /// many ticks pass after starting a round. Defaults to 8 delta.
    pub round_timeout: Option<Time>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            n: 4,
            f: 1,
            th: 3,
            rounds: 60,
            error_threshold: 0.05,
            learning_rate: 0.5,
            data: DatasetSpec::default(),
            mode: Mode::FedavgPlain,
            attackers: BTreeSet::new(),
            asdp: AsdpParams::default(),
            tau: 0.90,
            defense_bound: Some(0.0),
            group: GroupSpec::default(),
            encryption: EncryptionKind::Hybrid,
            delta: 2,
            gst: 0,
            batch_size: None,
            round_timeout: None,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), DpmlError> {
        self.check().map_err(|i| DpmlError::Config(i.to_string()))
    }

    /// Like `validate`, but names the offending field.
    pub fn check(&self) -> Result<(), ConfigIssue> {
        let bad = |field: &'static str, reason: String| Err(ConfigIssue { field, reason });
        if self.n == 0 {
            return bad("n", "n must be positive".into());
        }
        if self.f > max_faults(self.n) {
            return bad("f", format!("f = {} exceeds (n-1)/3 for n = {}", self.f, self.n));
        }
        if self.n != 3 * self.f + 1 {
            return bad("n", format!("n = {} must equal 3f+1 with f = {}", self.n, self.f));
        }
        if self.th == 0 || self.th > self.n {
            return bad("th", format!("threshold {} outside 1..={}", self.th, self.n));
        }
        if self.th > self.n - self.f {
            return bad(
                "th",
                format!(
                    "threshold {} cannot be met by the {} honest participants",
                    self.th,
                    self.n - self.f
                ),
            );
        }
        if self.rounds == 0 {
            return bad("rounds", "rounds must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "learning rate must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau", "tau must lie in [0, 1]".into());
        }
        if self.attackers.len() > self.f {
            return bad(
                "attackers",
                format!("{} attackers exceed f = {}", self.attackers.len(), self.f),
            );
        }
        if let Some(a) = self.attackers.iter().find(|&&a| a as usize >= self.n) {
            return bad("attackers", format!("attacker {a} is not a participant"));
        }
        if self.delta == 0 {
            return bad("delta", "delta must be positive".into());
        }
        if let Some(b) = self.batch_size {
            if b == 0 || b > self.n {
                return bad("batch_size", format!("batch size {b} outside 1..={}", self.n));
            }
        }
        if let Err(reason) = self.data.validate() {
            return bad("data", reason);
        }
        if let Err(e) = self.asdp.validate() {
            return bad("asdp", e.to_string());
        }
        Ok(())
    }

    /// Participants running the honest protocol in this mode.
    pub fn honest(&self) -> Vec<NodeId> {
        (0..self.n as NodeId)
            .filter(|id| !(self.mode.attacks() && self.attackers.contains(id)))
            .collect()
    }

    pub fn active_attackers(&self) -> Vec<NodeId> {
        if self.mode.attacks() {
            self.attackers.iter().copied().collect()
        } else {
            Vec::new()
        }
    }

    pub fn effective_batch_size(&self) -> usize {
        self.batch_size.unwrap_or(if self.active_attackers().is_empty() {
            self.n
        } else {
            2 * self.f + 1
        })
    }

    pub fn effective_round_timeout(&self) -> Time {
        self.round_timeout.unwrap_or(8 * self.delta)
    }

    /// Generous simulated-time limit for the networked workflows.
    fn time_limit(&self) -> Time {
        (self.rounds as Time + 1) * 10_000 * self.delta + self.gst
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    pub field: &'static str,
    pub reason: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_accuracy: f64,
    pub inference_time: InferenceTime,
    pub rounds_run: usize,
    /// First round whose mean training error reached the threshold.
    pub converged_at: Option<usize>,
    pub end_time: Option<Time>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: Mode,
    pub rounds: Vec<RoundMetrics>,
    pub attacks: Vec<AttackRecord>,
    pub summary: RunSummary,
}

/// One participant's view of one finished round.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct NodeRound {
    pub w: Vec<f64>,
    pub dealers: Vec<NodeId>,
    pub dealer_cosines: BTreeMap<NodeId, f64>,
    pub started_at: Time,
    pub finished_at: Time,
}

/// Everything fixed before a run starts.
pub(crate) struct Setup {
    pub cfg: TrainingConfig,
    pub group: GroupParams,
    pub codec: FixedPointCodec,
    pub data: Vec<Dataset>,
    pub test: Dataset,
    pub init: Vec<f64>,
}

impl Setup {
    fn new(cfg: &TrainingConfig) -> Result<Self, DpmlError> {
        cfg.validate()?;
        let group = GroupParams::generate(cfg.group.p_bits, cfg.group.q_bits, cfg.group.seed)?;
        let codec = FixedPointCodec::with_default_precision(group.scalars());
        Ok(Setup {
            data: (0..cfg.n as NodeId)
                .map(|i| cfg.data.participant(cfg.seed, i))
                .collect(),
            test: cfg.data.test_set(cfg.seed),
            init: cfg.data.initial_model(cfg.seed),
            cfg: cfg.clone(),
            group,
            codec,
        })
    }

    /// Evaluation point and dealer tag of a participant.
    pub fn point(id: NodeId) -> u32 {
        id + 1
    }
}

pub fn run(cfg: &TrainingConfig) -> Result<RunResult, DpmlError> {
    run_traced(cfg, TraceLevel::Off).map(|(r, _)| r)
}

/// Like [`run`], also returning the simulator trace (empty for
/// `fedavg-plain`, which has no network).
pub fn run_traced(cfg: &TrainingConfig, level: TraceLevel) -> Result<(RunResult, Trace), DpmlError> {
    let setup = Setup::new(cfg)?;
    let ((views, attacks, end_time), trace) = match cfg.mode {
        Mode::FedavgPlain => ((plain::run(&setup), Vec::new(), None), Trace::new(level)),
        Mode::BaselineVss | Mode::BaselineVssAcumpa => baseline::run(&setup, level)?,
        Mode::Ebyftves | Mode::EbyftvesAcumpa => gated::run(&setup, level)?,
    };
    Ok((assemble(&setup, views, attacks, end_time), trace))
}

fn assemble(
    setup: &Setup,
    views: BTreeMap<NodeId, Vec<NodeRound>>,
    mut attacks: Vec<AttackRecord>,
    end_time: Option<Time>,
) -> RunResult {
    let cfg = &setup.cfg;
    let reporter = *views.keys().next().expect("at least one honest participant");
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let mut accuracy = BTreeMap::new();
        let mut error = 0.0;
        for (id, rs) in &views {
            accuracy.insert(*id, model::accuracy(&rs[t].w, &setup.test));
            error += model::loss(&rs[t].w, &setup.data[*id as usize]);
        }
        let own = &views[&reporter][t];
        let consistent = views.values().all(|rs| {
            rs[t]
                .w
                .iter()
                .map(|x| x.to_bits())
                .eq(own.w.iter().map(|x| x.to_bits()))
        });
        rounds.push(RoundMetrics {
            round: t + 1,
            mean_accuracy: accuracy.values().sum::<f64>() / accuracy.len() as f64,
            accuracy,
            train_error: error / views.len() as f64,
            z: own.dealers.len(),
            dealers: own.dealers.clone(),
            dealer_cosines: own.dealer_cosines.clone(),
            latency: (cfg.mode != Mode::FedavgPlain).then(|| own.finished_at - own.started_at),
            consistent,
            params: own.w.clone(),
        });
    }
    // Training stops at the first round whose error clears the threshold;
    // the simulation itself always runs every round.
    let converged_at = rounds
        .iter()
        .position(|r| r.train_error <= cfg.error_threshold)
        .map(|i| i + 1);
    if let Some(c) = converged_at {
        rounds.truncate(c);
        attacks.retain(|a| a.round <= c);
    }
    for a in &mut attacks {
        a.included = views[&reporter]
            .get(a.round - 1)
            .is_some_and(|r| r.dealers.contains(&a.attacker));
    }
    let accs: Vec<f64> = rounds.iter().map(|r| r.mean_accuracy).collect();
    RunResult {
        mode: cfg.mode,
        summary: RunSummary {
            final_accuracy: *accs.last().expect("at least one round"),
            inference_time: inference_time(&accs, cfg.tau),
            rounds_run: rounds.len(),
            converged_at,
            end_time,
        },
        rounds,
        attacks,
    }
}
