//! Executes a scenario matrix and writes one result file per run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sharebft::consensus::cluster::{run_cluster, ClusterReport};
use sharebft::dpml::{self, AttackRecord, InferenceTime, Mode, RoundMetrics, RunResult, TrainingConfig};
use sharebft::netsim::{NodeId, Time, Trace, TraceLevel};

use crate::scenario::{ConsensusSpec, Expectation, ScenarioFile};

/// Bumped whenever a field of a result file changes meaning or disappears.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// One row of the mode x {Acc, IT} table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub mode: Mode,
    pub accuracy: f64,
    pub inference_time: InferenceTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingFile {
    pub schema_version: u32,
    pub scenario: String,
    pub kind: String,
    pub seed: u64,
    pub mode: Mode,
    pub config: TrainingConfig,
    pub table: TableRow,
    pub rounds: Vec<RoundMetrics>,
    pub attacks: Vec<AttackRecord>,
    pub summary: dpml::RunSummary,
    pub checks: Vec<Check>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommitEntry {
    pub time: Time,
    pub view: u64,
    pub digest: String,
    pub requests: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusFile {
    pub schema_version: u32,
    pub scenario: String,
    pub kind: String,
    pub seed: u64,
    pub config: ConsensusSpec,
    pub outcome: String,
    pub end_time: Time,
    pub honest: Vec<NodeId>,
    pub safe: bool,
    /// Slot to the distinct digests honest replicas executed there.
    pub conflicts: BTreeMap<u64, Vec<String>>,
    /// Per honest replica, slot to executed batch.
    pub commits: BTreeMap<NodeId, BTreeMap<u64, CommitEntry>>,
    /// Ticks from submission until every honest replica executed the slot.
    pub latency: BTreeMap<u64, Option<Time>>,
    pub rejected: u64,
    pub view_changes_started: u64,
    pub final_views: BTreeMap<NodeId, u64>,
    pub trace_counts: BTreeMap<String, usize>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

pub struct RunOptions {
    pub out_dir: PathBuf,
    pub trace: bool,
}

/// What one matrix entry produced.
pub struct Produced {
    pub stem: String,
    pub json: String,
    pub summary: String,
    pub trace: Option<String>,
    pub passed: bool,
}

pub struct RunReport {
    pub files: Vec<PathBuf>,
    pub summaries: Vec<String>,
    pub failed: Vec<String>,
}

enum Job {
    Training(u64, Mode),
    Consensus(u64),
}

pub fn stem(scenario: &str, seed: u64, mode: Option<Mode>) -> String {
    match mode {
        Some(m) => format!("{scenario}__seed{seed}__{m}"),
        None => format!("{scenario}__seed{seed}"),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Runs every (seed, mode) entry, in parallel, and writes the result files.
pub fn run_scenario(scenario: &ScenarioFile, opts: &RunOptions) -> Result<RunReport> {
    let jobs: Vec<Job> = if scenario.is_training() {
        scenario
            .seeds
            .iter()
            .flat_map(|&s| scenario.modes().into_iter().map(move |m| Job::Training(s, m)))
            .collect()
    } else {
        scenario.seeds.iter().map(|&s| Job::Consensus(s)).collect()
    };
    info!("{}: {} runs", scenario.name, jobs.len());
    let produced: Vec<Produced> = jobs
        .par_iter()
        .map(|job| match *job {
            Job::Training(seed, mode) => run_training(scenario, seed, mode, opts.trace),
            Job::Consensus(seed) => run_consensus(scenario, seed, opts.trace),
        })
        .collect::<Result<_>>()?;
    fs::create_dir_all(&opts.out_dir).with_context(|| format!("creating {}", opts.out_dir.display()))?;
    let mut report = RunReport {
        files: Vec::new(),
        summaries: Vec::new(),
        failed: Vec::new(),
    };
    for p in produced {
        let json = opts.out_dir.join(format!("{}.json", p.stem));
        write(&json, &p.json)?;
        write(&opts.out_dir.join(format!("{}.txt", p.stem)), &p.summary)?;
        if let Some(t) = &p.trace {
            write(&opts.out_dir.join(format!("{}.trace.jsonl", p.stem)), t)?;
        }
        if !p.passed {
            report.failed.push(p.stem.clone());
        }
        report.files.push(json);
        report.summaries.push(p.summary);
    }
    Ok(report)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn expectations(scenario: &ScenarioFile, mode: Option<Mode>) -> impl Iterator<Item = &Expectation> {
    scenario.expect.iter().filter(move |e| e.applies_to(mode))
}

pub fn run_training(scenario: &ScenarioFile, seed: u64, mode: Mode, trace: bool) -> Result<Produced> {
    let cfg = scenario.training_config(seed, mode).expect("training scenario");
    let level = if trace { TraceLevel::Full } else { TraceLevel::Off };
    let name = stem(&scenario.name, seed, Some(mode));
    info!("running {name}");
    let (result, tr) = dpml::run_traced(&cfg, level).with_context(|| format!("run {name}"))?;
    let mut checks = Vec::new();
    for e in expectations(scenario, Some(mode)) {
        training_checks(e, &cfg, &result, &mut checks)?;
    }
    let passed = checks.iter().all(|c| c.passed);
    let file = TrainingFile {
        schema_version: SCHEMA_VERSION,
        scenario: scenario.name.clone(),
        kind: "training".into(),
        seed,
        mode,
        table: TableRow {
            mode,
            accuracy: result.summary.final_accuracy,
            inference_time: result.summary.inference_time,
        },
        config: cfg,
        rounds: result.rounds,
        attacks: result.attacks,
        summary: result.summary,
        checks,
        passed,
    };
    let summary = training_summary(&name, &file);
    Ok(Produced {
        stem: name,
        json: serde_json::to_string_pretty(&file)? + "\n",
        summary,
        trace: trace.then(|| tr.to_jsonl()),
        passed,
    })
}

fn training_checks(e: &Expectation, cfg: &TrainingConfig, r: &RunResult, out: &mut Vec<Check>) -> Result<()> {
    if let Some(want) = e.consistent {
        let bad: Vec<usize> = r.rounds.iter().filter(|m| !m.consistent).map(|m| m.round).collect();
        out.push(check(
            "consistent",
            bad.is_empty() == want,
            format!("inconsistent rounds {bad:?}"),
        ));
    }
    let adaptive = r.attacks.iter().filter(|a| a.adaptive).count();
    if let Some(min) = e.min_adaptive_rounds {
        out.push(check(
            "min_adaptive_rounds",
            adaptive >= min,
            format!("{adaptive} adaptive rounds, need >= {min}"),
        ));
    }
    if let Some(max) = e.max_adaptive_rounds {
        out.push(check(
            "max_adaptive_rounds",
            adaptive <= max,
            format!("{adaptive} adaptive rounds, allow <= {max}"),
        ));
    }
    if let Some(want) = e.attacker_included {
        let odd: Vec<usize> = r
            .attacks
            .iter()
            .filter(|a| a.included != want)
            .map(|a| a.round)
            .collect();
        out.push(check(
            "attacker_included",
            odd.is_empty() && !r.attacks.is_empty(),
            format!("{} attack records, rounds disagreeing: {odd:?}", r.attacks.len()),
        ));
    }
    if let Some(min) = e.min_final_accuracy {
        let acc = r.summary.final_accuracy;
        out.push(check(
            "min_final_accuracy",
            acc >= min,
            format!("final accuracy {acc:.4}, need >= {min}"),
        ));
    }
    if let Some(want) = e.reaches_target {
        let it = r.summary.inference_time;
        out.push(check(
            "reaches_target",
            (it != InferenceTime::NEVER) == want,
            format!("inference time {it} at tau {}", cfg.tau),
        ));
    }
    if let Some(z) = e.dealers_per_round {
        let bad: Vec<usize> = r.rounds.iter().filter(|m| m.z != z).map(|m| m.round).collect();
        out.push(check(
            "dealers_per_round",
            bad.is_empty(),
            format!("rounds without {z} dealers: {bad:?}"),
        ));
    }
    if let Some(tol) = e.plain_tolerance {
        let plain = dpml::run(&TrainingConfig {
            mode: Mode::FedavgPlain,
            ..cfg.clone()
        })?;
        let mut worst = 0.0f64;
        for (a, b) in r.rounds.iter().zip(&plain.rounds) {
            for (x, y) in a.params.iter().zip(&b.params) {
                worst = worst.max((x - y).abs());
            }
        }
        let same_len = r.rounds.len() == plain.rounds.len();
        out.push(check(
            "plain_tolerance",
            same_len && worst <= tol,
            format!(
                "max coordinate gap {worst:.3e} over {} rounds, allow {tol:.3e}",
                r.rounds.len()
            ),
        ));
    }
    Ok(())
}

fn training_summary(name: &str, f: &TrainingFile) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{name}: {}", if f.passed { "PASS" } else { "FAIL" });
    let _ = writeln!(
        s,
        "  mode {}  rounds {}  final accuracy {:.4}  inference time {}",
        f.mode, f.summary.rounds_run, f.summary.final_accuracy, f.summary.inference_time
    );
    if !f.attacks.is_empty() {
        let adaptive = f.attacks.iter().filter(|a| a.adaptive).count();
        let included = f.attacks.iter().filter(|a| a.included).count();
        let _ = writeln!(
            s,
            "  attacker: {} rounds, {adaptive} adaptive, {included} aggregated",
            f.attacks.len()
        );
    }
    for c in &f.checks {
        let _ = writeln!(
            s,
            "  [{}] {}: {}",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    s
}

pub fn run_consensus(scenario: &ScenarioFile, seed: u64, trace: bool) -> Result<Produced> {
    let spec = scenario.consensus.as_ref().expect("consensus scenario");
    let cfg = spec.cluster(seed);
    let name = stem(&scenario.name, seed, None);
    info!("running {name}");
    let report = run_cluster(&cfg).with_context(|| format!("run {name}"))?;
    let latency: BTreeMap<u64, Option<Time>> = cfg
        .submissions
        .iter()
        .map(|&(slot, at)| (slot, report.completion_time(slot).map(|t| t.saturating_sub(at))))
        .collect();
    let mut checks = Vec::new();
    for e in expectations(scenario, None) {
        consensus_checks(e, &cfg.submissions, spec.gst, &report, &latency, &mut checks);
    }
    let passed = checks.iter().all(|c| c.passed);
    let file = ConsensusFile {
        schema_version: SCHEMA_VERSION,
        scenario: scenario.name.clone(),
        kind: "consensus".into(),
        seed,
        config: spec.clone(),
        outcome: format!("{:?}", report.outcome),
        end_time: report.end_time,
        honest: report.honest.clone(),
        safe: report.is_safe(),
        conflicts: report
            .conflicts()
            .into_iter()
            .map(|(s, d)| (s, d.iter().map(|x| hex(x)).collect()))
            .collect(),
        commits: report
            .logs
            .iter()
            .map(|(id, log)| {
                let entries = log
                    .iter()
                    .map(|(s, r)| {
                        let e = CommitEntry {
                            time: r.time,
                            view: r.view,
                            digest: hex(&r.digest),
                            requests: r.requests,
                        };
                        (*s, e)
                    })
                    .collect();
                (*id, entries)
            })
            .collect(),
        latency,
        rejected: report.rejected,
        view_changes_started: report.view_changes_started,
        final_views: report.final_views.clone(),
        trace_counts: trace_counts(&report.trace),
        checks,
        passed,
    };
    let summary = consensus_summary(&name, &file);
    Ok(Produced {
        stem: name,
        json: serde_json::to_string_pretty(&file)? + "\n",
        summary,
        trace: trace.then(|| report.trace.to_jsonl()),
        passed,
    })
}

fn trace_counts(trace: &Trace) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for e in trace.events() {
        *counts.entry(e.kind.clone()).or_default() += 1;
    }
    counts
}

fn consensus_checks(
    e: &Expectation,
    submissions: &[(u64, Time)],
    gst: Time,
    r: &ClusterReport,
    latency: &BTreeMap<u64, Option<Time>>,
    out: &mut Vec<Check>,
) {
    if let Some(want) = e.safe {
        out.push(check(
            "safe",
            r.is_safe() == want,
            format!("conflicting slots {:?}", r.conflicts().len()),
        ));
    }
    if let Some(want) = e.all_committed {
        let missing: Vec<u64> = submissions
            .iter()
            .map(|&(s, _)| s)
            .filter(|&s| !r.committed_everywhere(s))
            .collect();
        out.push(check(
            "all_committed",
            missing.is_empty() == want,
            format!("slots not executed everywhere: {missing:?}"),
        ));
    }
    if let Some(bound) = e.max_commit_latency {
        let late: Vec<(u64, Option<Time>)> = submissions
            .iter()
            .filter(|&&(_, at)| at >= gst)
            .map(|&(s, _)| (s, latency[&s]))
            .filter(|(_, l)| l.is_none_or(|l| l > bound))
            .collect();
        out.push(check(
            "max_commit_latency",
            late.is_empty(),
            format!("post-GST slots over {bound} ticks: {late:?}"),
        ));
    }
    if let Some(min) = e.min_rejected {
        out.push(check(
            "min_rejected",
            r.rejected >= min,
            format!("{} rejected messages, need >= {min}", r.rejected),
        ));
    }
    for kind in &e.trace_contains {
        let n = r.trace.kinds(kind).count();
        out.push(check("trace_contains", n > 0, format!("{n} {kind:?} events")));
    }
}

fn consensus_summary(name: &str, f: &ConsensusFile) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{name}: {}", if f.passed { "PASS" } else { "FAIL" });
    let worst = f.latency.values().flatten().max();
    let _ = writeln!(
        s,
        "  outcome {}  safe {}  slots {}  worst latency {}  rejected {}  view changes {}",
        f.outcome,
        f.safe,
        f.latency.len(),
        worst.map_or("-".to_string(), |w| w.to_string()),
        f.rejected,
        f.view_changes_started
    );
    for c in &f.checks {
        let _ = writeln!(
            s,
            "  [{}] {}: {}",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    s
}
