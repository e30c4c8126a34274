//! Scenario files: one TOML document describing either a training matrix or
//! a consensus cluster, plus the assertions a run must satisfy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sharebft::consensus::cluster::ClusterConfig;
use sharebft::dpml::{Mode, TrainingConfig};
use sharebft::netsim::{max_faults, Behavior, NetConfig, NodeId, Time, TraceLevel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Training only. Empty means the mode given in `[training]`.
    #[serde(default)]
    pub modes: Vec<Mode>,
    pub training: Option<TrainingConfig>,
    pub consensus: Option<ConsensusSpec>,
    #[serde(default)]
    pub expect: Vec<Expectation>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsensusSpec {
    pub n: usize,
    pub batch_size: Option<usize>,
    pub gst: Time,
    pub delta: Time,
    pub drop_prob: f64,
    pub duplicate_prob: f64,
    pub tamper_prob: f64,
    pub isolate: BTreeSet<NodeId>,
    /// Replica id (as a string key) to scripted behaviour.
    pub behaviors: BTreeMap<String, Behavior>,
    /// Slots 0..slots, submitted every `interval` ticks from `start`.
    pub slots: u64,
    pub start: Time,
    pub interval: Time,
    pub late_by: Time,
    pub until: Time,
}

impl Default for ConsensusSpec {
    fn default() -> Self {
        ConsensusSpec {
            n: 4,
            batch_size: None,
            gst: 0,
            delta: 2,
            drop_prob: 0.0,
            duplicate_prob: 0.0,
            tamper_prob: 0.0,
            isolate: BTreeSet::new(),
            behaviors: BTreeMap::new(),
            slots: 3,
            start: 0,
            interval: 1,
            late_by: 0,
            until: 100_000,
        }
    }
}

impl ConsensusSpec {
    fn behaviors(&self) -> BTreeMap<NodeId, Behavior> {
        self.behaviors
            .iter()
            .filter_map(|(k, b)| k.parse().ok().map(|id| (id, *b)))
            .collect()
    }

    pub fn cluster(&self, seed: u64) -> ClusterConfig {
        let mut c = ClusterConfig::new(self.n).with_slots(self.slots, self.start, self.interval);
        c.batch_size = self.batch_size;
        c.net = NetConfig {
            gst: self.gst,
            delta: self.delta,
            seed,
            trace: TraceLevel::Full,
            ..NetConfig::default()
        };
        c.drop_prob = self.drop_prob;
        c.duplicate_prob = self.duplicate_prob;
        c.tamper_prob = self.tamper_prob;
        c.isolate = self.isolate.clone();
        c.behaviors = self.behaviors();
        c.late_by = self.late_by;
        c.until = self.until;
        c.key_seed = seed;
        c
    }
}

/// Conditions every matching run must meet. Unset fields are not checked.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Expectation {
    /// Training only: restrict to runs of this mode.
    pub mode: Option<Mode>,

    /// No two honest replicas executed different digests for a slot.
    pub safe: Option<bool>,
    pub all_committed: Option<bool>,
    /// Ticks from submission to execution at every honest replica, for slots
    /// submitted at or after GST.
    pub max_commit_latency: Option<Time>,
    pub min_rejected: Option<u64>,
    /// Trace event kinds that must occur at least once.
    pub trace_contains: Vec<String>,

    /// Every round leaves all honest participants with identical models.
    pub consistent: Option<bool>,
    pub min_adaptive_rounds: Option<usize>,
    pub max_adaptive_rounds: Option<usize>,
    /// Every attacker submission was (or was not) aggregated.
    pub attacker_included: Option<bool>,
    pub min_final_accuracy: Option<f64>,
    /// Accuracy reaches tau at some round.
    pub reaches_target: Option<bool>,
    /// Per-coordinate distance to fedavg-plain parameters, every round.
    pub plain_tolerance: Option<f64>,
    /// Dealers aggregated in every round.
    pub dealers_per_round: Option<usize>,
}

impl Expectation {
    const CONSENSUS_KEYS: [&'static str; 5] = [
        "safe",
        "all_committed",
        "max_commit_latency",
        "min_rejected",
        "trace_contains",
    ];

    fn set_keys(&self) -> Vec<&'static str> {
        let mut keys = Vec::new();
        let mut add = |set: bool, k| {
            if set {
                keys.push(k)
            }
        };
        add(self.mode.is_some(), "mode");
        add(self.safe.is_some(), "safe");
        add(self.all_committed.is_some(), "all_committed");
        add(self.max_commit_latency.is_some(), "max_commit_latency");
        add(self.min_rejected.is_some(), "min_rejected");
        add(!self.trace_contains.is_empty(), "trace_contains");
        add(self.consistent.is_some(), "consistent");
        add(self.min_adaptive_rounds.is_some(), "min_adaptive_rounds");
        add(self.max_adaptive_rounds.is_some(), "max_adaptive_rounds");
        add(self.attacker_included.is_some(), "attacker_included");
        add(self.min_final_accuracy.is_some(), "min_final_accuracy");
        add(self.reaches_target.is_some(), "reaches_target");
        add(self.plain_tolerance.is_some(), "plain_tolerance");
        add(self.dealers_per_round.is_some(), "dealers_per_round");
        keys
    }

    pub fn applies_to(&self, mode: Option<Mode>) -> bool {
        self.mode.is_none() || self.mode == mode
    }
}

/// A key path into the scenario document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Seg {
    Key(String),
    Index(usize),
}

fn path(keys: &[&str]) -> Vec<Seg> {
    keys.iter().map(|k| Seg::Key(k.to_string())).collect()
}

/// A scenario that parsed but makes no sense, or did not parse at all.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SchemaError {
    pub file: String,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "{}:{l}:{c}: {}", self.file, self.message),
            _ => write!(f, "{}: {}", self.file, self.message),
        }
    }
}

impl std::error::Error for SchemaError {}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}

/// Byte offset of the deepest key of `path` that exists in the document.
fn locate(text: &str, path: &[Seg]) -> Option<usize> {
    let doc = toml_edit::ImDocument::parse(text).ok()?;
    let mut table: &dyn toml_edit::TableLike = doc.as_table();
    let mut array = None;
    let mut best = None;
    for seg in path {
        match seg {
            Seg::Key(k) => {
                let Some((key, item)) = table.get_key_value(k) else {
                    break;
                };
                best = key.span().map(|s| s.start).or(best);
                match item {
                    toml_edit::Item::ArrayOfTables(a) => array = Some(a),
                    other => match other.as_table_like() {
                        Some(t) => table = t,
                        None => break,
                    },
                }
            }
            Seg::Index(i) => {
                let Some(t) = array.and_then(|a| a.get(*i)) else { break };
                best = t.span().map(|s| s.start).or(best);
                table = t;
            }
        }
    }
    best
}

impl ScenarioFile {
    pub fn load(file: &Path) -> Result<ScenarioFile, SchemaError> {
        let text = std::fs::read_to_string(file).map_err(|e| SchemaError {
            file: file.display().to_string(),
            line: None,
            column: None,
            message: e.to_string(),
        })?;
        Self::parse(&text, &file.display().to_string())
    }

    pub fn parse(text: &str, file: &str) -> Result<ScenarioFile, SchemaError> {
        let at = |offset: Option<usize>, message: String| {
            let (line, column) = offset.map(|o| line_col(text, o)).unzip();
            SchemaError {
                file: file.to_string(),
                line,
                column,
                message,
            }
        };
        let scenario: ScenarioFile = toml::from_str(text).map_err(|e| {
            let offset = e.span().map(|s| s.start);
            at(offset, e.message().to_string())
        })?;
        scenario.check().map_err(|(p, msg)| at(locate(text, &p), msg))?;
        Ok(scenario)
    }

    pub fn is_training(&self) -> bool {
        self.training.is_some()
    }

    fn check(&self) -> Result<(), (Vec<Seg>, String)> {
        let err = |keys: &[&str], msg: String| Err((path(keys), msg));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return err(&["name"], "name must be non-empty and use only [A-Za-z0-9_-]".into());
        }
        if self.seeds.is_empty() {
            return err(&["seeds"], "at least one seed is required".into());
        }
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return err(&["seeds"], "seeds must be distinct".into());
        }
        match (&self.training, &self.consensus) {
            (Some(_), Some(_)) | (None, None) => {
                return err(&["name"], "exactly one of [training] or [consensus] is required".into())
            }
            (Some(t), None) => {
                let distinct: BTreeSet<_> = self.modes.iter().collect();
                if distinct.len() != self.modes.len() {
                    return err(&["modes"], "modes must be distinct".into());
                }
                t.check()
                    .map_err(|i| (path(&["training", i.field]), format!("{}: {}", i.field, i.reason)))?;
            }
            (None, Some(c)) => {
                if !self.modes.is_empty() {
                    return err(&["modes"], "modes apply to training scenarios only".into());
                }
                check_consensus(c).map_err(|(k, msg)| (path(&["consensus", k]), format!("{k}: {msg}")))?;
            }
        }
        for (i, e) in self.expect.iter().enumerate() {
            let keys = e.set_keys();
            let misplaced = keys.iter().find(|k| {
                let consensus_key = Expectation::CONSENSUS_KEYS.contains(k);
                consensus_key != self.consensus.is_some()
            });
            if let Some(k) = misplaced {
                let kind = if self.is_training() { "training" } else { "consensus" };
                return Err((
                    vec![Seg::Key("expect".into()), Seg::Index(i), Seg::Key(k.to_string())],
                    format!("{k}: not applicable to a {kind} scenario"),
                ));
            }
        }
        Ok(())
    }

    /// Applies command-line overrides.
    pub fn with_overrides(mut self, seed: Option<u64>, mode: Option<Mode>) -> Result<ScenarioFile, String> {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        if let Some(m) = mode {
            if !self.is_training() {
                return Err("--mode applies to training scenarios only".into());
            }
            self.modes = vec![m];
        }
        Ok(self)
    }

    /// Modes to run, in matrix order.
    pub fn modes(&self) -> Vec<Mode> {
        match &self.training {
            Some(t) if self.modes.is_empty() => vec![t.mode],
            Some(_) => self.modes.clone(),
            None => Vec::new(),
        }
    }

    pub fn training_config(&self, seed: u64, mode: Mode) -> Option<TrainingConfig> {
        self.training.as_ref().map(|t| TrainingConfig {
            seed,
            mode,
            ..t.clone()
        })
    }
}

fn check_consensus(c: &ConsensusSpec) -> Result<(), (&'static str, String)> {
    if c.n < 4 {
        return Err(("n", format!("n = {} leaves no room for a fault; use n >= 4", c.n)));
    }
    let f = max_faults(c.n);
    let mut ids = BTreeSet::new();
    for k in c.behaviors.keys() {
        match k.parse::<NodeId>() {
            Ok(id) if (id as usize) < c.n => {
                ids.insert(id);
            }
            _ => return Err(("behaviors", format!("{k:?} is not a replica id below n = {}", c.n))),
        }
    }
    if ids.len() > f {
        return Err(("behaviors", format!("{} faulty replicas exceed f = {f}", ids.len())));
    }
    if let Some(b) = c.batch_size {
        if b == 0 || b > c.n {
            return Err(("batch_size", format!("batch size {b} outside 1..={}", c.n)));
        }
    }
    if c.delta == 0 {
        return Err(("delta", "delta must be positive".into()));
    }
    for (k, p) in [
        ("drop_prob", c.drop_prob),
        ("duplicate_prob", c.duplicate_prob),
        ("tamper_prob", c.tamper_prob),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err((k, format!("probability {p} outside [0, 1]")));
        }
    }
    if let Some(id) = c.isolate.iter().find(|&&id| id as usize >= c.n) {
        return Err(("isolate", format!("{id} is not a replica id")));
    }
    if c.slots == 0 {
        return Err(("slots", "at least one slot is required".into()));
    }
    Ok(())
}
