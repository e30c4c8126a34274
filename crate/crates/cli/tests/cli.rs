use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sharebft_cli::{collect, ScenarioFile};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sharebft"));
    c.env_remove(sharebft_cli::OUT_DIR_ENV);
    c
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.toml"))
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".json"))
        .collect();
    v.sort();
    v
}

const SMALL: &str = r#"
name = "small"
seeds = [0, 1, 2, 3, 4]
modes = ["fedavg-plain", "baseline-vss", "baseline-vss+acumpa", "ebyftves", "ebyftves+acumpa"]

[training]
rounds = 2
attackers = [3]
"#;

#[test]
fn equivocation_scenario_passes_and_traces_the_view_change() {
    let out = TempDir::new().unwrap();
    let o = bin()
        .args([
            "run",
            bundled("safety_equivocation").to_str().unwrap(),
            "--seed",
            "3",
            "--trace",
            "--out-dir",
        ])
        .arg(out.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json_files(out.path()), ["safety_equivocation__seed3.json"]);
    let trace = fs::read_to_string(out.path().join("safety_equivocation__seed3.trace.jsonl")).unwrap();
    assert!(trace.contains("\"kind\":\"view-change\""));
    let result: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("safety_equivocation__seed3.json")).unwrap()).unwrap();
    assert_eq!(result["schema_version"], 1);
    assert_eq!(result["safe"], true);
    assert!(out.path().join("safety_equivocation__seed3.txt").exists());
}

#[test]
fn excess_faults_are_a_schema_error_with_a_line() {
    let dir = TempDir::new().unwrap();
    let p = write(dir.path(), "bad.toml", "name = \"bad\"\n\n[training]\nn = 4\nf = 2\n");
    let o = bin().arg("validate").arg(&p).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.toml:5:1: f:"), "{}", stderr(&o));
    let o = bin()
        .arg("run")
        .arg(&p)
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(json_files(dir.path()).is_empty());
}

#[test]
fn unknown_keys_are_rejected_with_a_line() {
    let dir = TempDir::new().unwrap();
    let p = write(
        dir.path(),
        "bad.toml",
        "name = \"bad\"\n[consensus]\nn = 4\nslotz = 3\n",
    );
    let o = bin().arg("validate").arg(&p).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains(":4:1:") && err.contains("slotz"), "{err}");
}

#[test]
fn failed_assertion_exits_non_zero() {
    let dir = TempDir::new().unwrap();
    let p = write(
        dir.path(),
        "s.toml",
        "name = \"s\"\n[consensus]\nn = 4\n[[expect]]\nmin_rejected = 1000\n",
    );
    let o = bin()
        .arg("run")
        .arg(&p)
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let result = fs::read_to_string(dir.path().join("s__seed0.json")).unwrap();
    assert!(result.contains("\"passed\": false"));
}

#[test]
fn matrix_writes_one_file_per_seed_and_mode() {
    let dir = TempDir::new().unwrap();
    let p = write(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("out");
    let o = bin()
        .arg("run")
        .arg(&p)
        .env(sharebft_cli::OUT_DIR_ENV, &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let files = json_files(&out);
    assert_eq!(files.len(), 25);
    let mut expected: Vec<String> = (0..5)
        .flat_map(|s| {
            [
                "fedavg-plain",
                "baseline-vss",
                "baseline-vss+acumpa",
                "ebyftves",
                "ebyftves+acumpa",
            ]
            .map(|m| format!("small__seed{s}__{m}.json"))
        })
        .collect();
    expected.sort();
    assert_eq!(files, expected);
}

#[test]
fn overrides_narrow_the_matrix() {
    let dir = TempDir::new().unwrap();
    let p = write(dir.path(), "small.toml", SMALL);
    let o = bin()
        .arg("run")
        .arg(&p)
        .args(["--seed", "9", "--mode", "ebyftves", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json_files(dir.path()), ["small__seed9__ebyftves.json"]);

    let o = bin()
        .arg("run")
        .arg(bundled("inconsistent_dealer"))
        .args(["--mode", "ebyftves", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_aggregates_seeds_and_refuses_mixed_configs() {
    let dir = TempDir::new().unwrap();
    let p = write(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("out");
    let o = bin().arg("run").arg(&p).arg("--out-dir").arg(&out).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));

    // One seed, three modes: a three-row table.
    for m in ["fedavg-plain", "ebyftves", "baseline-vss"] {
        let src = out.join(format!("small__seed0__{m}.json"));
        fs::create_dir_all(dir.path().join("one")).unwrap();
        fs::copy(&src, dir.path().join("one").join(src.file_name().unwrap())).unwrap();
    }
    let one = collect(dir.path().join("one/*.json").to_str().unwrap()).unwrap();
    assert_eq!(one.rows.len(), 3);

    // Five seeds: mean and sample standard deviation over the files.
    let all = collect(out.join("*.json").to_str().unwrap()).unwrap();
    assert_eq!(all.rows.len(), 5);
    let accs: Vec<f64> = (0..5)
        .map(|s| {
            let v: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(out.join(format!("small__seed{s}__ebyftves.json"))).unwrap())
                    .unwrap();
            v["table"]["accuracy"].as_f64().unwrap()
        })
        .collect();
    let mean = accs.iter().sum::<f64>() / 5.0;
    let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    let row = all.rows.iter().find(|r| r.mode.name() == "ebyftves").unwrap();
    assert!((row.acc_mean - mean).abs() < 1e-12 && (row.acc_std - std).abs() < 1e-12);

    let csv_path = dir.path().join("t.csv");
    let o = bin()
        .args([
            "report",
            out.join("*.json").to_str().unwrap(),
            "--csv",
            csv_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("mode,runs,acc_mean,acc_std,it_mean,it_std,it_median,it_never"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("±"));

    // A run with a different learning rate cannot share a table.
    let other = write(
        dir.path(),
        "other.toml",
        &SMALL.replace("rounds = 2", "rounds = 2\nlearning_rate = 0.1"),
    );
    let o = bin()
        .arg("run")
        .arg(&other)
        .args(["--seed", "7", "--mode", "ebyftves", "--out-dir"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = bin()
        .args(["report", out.join("*.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("different configurations"), "{}", stderr(&o));

    let o = bin()
        .args(["report", dir.path().join("none/*.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no result files"));
}

#[test]
fn bundled_scenarios_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut count = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            ScenarioFile::load(&p).unwrap_or_else(|e| panic!("{e}"));
            count += 1;
        }
    }
    assert_eq!(count, 7);
}
