//! Aggregates training result files into a mode x {Acc, IT} table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context as _, Result};
use serde::Deserialize;
use sharebft::dpml::{mean_std, median, InferenceTime, Mode};

use crate::runner::SCHEMA_VERSION;

#[derive(Deserialize)]
struct Header {
    schema_version: u32,
    kind: String,
}

#[derive(Deserialize)]
struct Row {
    seed: u64,
    mode: Mode,
    config: serde_json::Value,
    table: Table,
}

#[derive(Deserialize)]
struct Table {
    accuracy: f64,
    inference_time: InferenceTime,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeStats {
    pub mode: Mode,
    pub runs: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    /// Infinite when any run never reached the target.
    pub it_mean: f64,
    pub it_std: f64,
    pub it_median: f64,
    pub it_never: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub seeds: BTreeSet<u64>,
    pub rows: Vec<ModeStats>,
}

pub fn collect(pattern: &str) -> Result<Report> {
    let mut files: Vec<PathBuf> = glob::glob(pattern)
        .with_context(|| format!("bad pattern {pattern:?}"))?
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "json"));
    files.sort();
    if files.is_empty() {
        bail!("no result files match {pattern:?}");
    }
    let mut reference: Option<(PathBuf, serde_json::Value)> = None;
    let mut by_mode: BTreeMap<Mode, Vec<(u64, f64, InferenceTime)>> = BTreeMap::new();
    let mut seeds = BTreeSet::new();
    for path in &files {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let header: Header =
            serde_json::from_str(&text).with_context(|| format!("{} is not a result file", path.display()))?;
        if header.schema_version != SCHEMA_VERSION {
            bail!(
                "{}: schema version {} is not supported (expected {SCHEMA_VERSION})",
                path.display(),
                header.schema_version
            );
        }
        if header.kind != "training" {
            bail!("{}: {} results have no accuracy table", path.display(), header.kind);
        }
        let row: Row = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // Runs are comparable when they differ only in seed and mode.
        let mut config = row.config;
        if let Some(obj) = config.as_object_mut() {
            obj.remove("seed");
            obj.remove("mode");
        }
        match &reference {
            None => reference = Some((path.clone(), config)),
            Some((first, c)) if *c != config => {
                bail!(
                    "{} and {} were produced with different configurations; refusing to mix them",
                    first.display(),
                    path.display()
                );
            }
            Some(_) => {}
        }
        let runs = by_mode.entry(row.mode).or_default();
        if runs.iter().any(|r| r.0 == row.seed) {
            return Err(anyhow!(
                "{}: duplicate run for mode {} seed {}",
                path.display(),
                row.mode,
                row.seed
            ));
        }
        seeds.insert(row.seed);
        runs.push((row.seed, row.table.accuracy, row.table.inference_time));
    }
    let rows = Mode::ALL
        .iter()
        .filter_map(|m| by_mode.get(m).map(|runs| (*m, runs)))
        .map(|(mode, runs)| {
            let acc: Vec<f64> = runs.iter().map(|r| r.1).collect();
            let it: Vec<f64> = runs.iter().map(|r| r.2.as_f64()).collect();
            let (acc_mean, acc_std) = mean_std(&acc);
            let it_never = runs.iter().filter(|r| r.2 == InferenceTime::NEVER).count();
            let (it_mean, it_std) = if it_never > 0 {
                (f64::INFINITY, f64::NAN)
            } else {
                mean_std(&it)
            };
            ModeStats {
                mode,
                runs: runs.len(),
                acc_mean,
                acc_std,
                it_mean,
                it_std,
                it_median: median(&it),
                it_never,
            }
        })
        .collect();
    Ok(Report { files, seeds, rows })
}

fn num(v: f64, digits: usize) -> String {
    if v.is_infinite() {
        "inf".into()
    } else if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.digits$}")
    }
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} result files, seeds {:?}", self.files.len(), self.seeds);
        let _ = writeln!(
            s,
            "{:<22} {:>4} {:>17} {:>15} {:>9} {:>6}",
            "mode", "runs", "Acc (mean ± std)", "IT (mean ± std)", "IT median", "IT inf"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<22} {:>4} {:>17} {:>15} {:>9} {:>6}",
                r.mode.name(),
                r.runs,
                format!("{} ± {}", num(r.acc_mean, 4), num(r.acc_std, 4)),
                format!("{} ± {}", num(r.it_mean, 1), num(r.it_std, 1)),
                num(r.it_median, 1),
                r.it_never
            );
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "mode",
            "runs",
            "acc_mean",
            "acc_std",
            "it_mean",
            "it_std",
            "it_median",
            "it_never",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.mode.name().to_string(),
                r.runs.to_string(),
                num(r.acc_mean, 6),
                num(r.acc_std, 6),
                num(r.it_mean, 3),
                num(r.it_std, 3),
                num(r.it_median, 1),
                r.it_never.to_string(),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}
