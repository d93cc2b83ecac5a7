use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use loopdet_cli::record::{ResultRecord, Status};
use loopdet_cli::ExperimentConfig;
use tempfile::TempDir;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn smoke(name: &str) -> PathBuf {
    repo().join("configs/smoke").join(name)
}

fn loopdet(out: &Path, workers: Option<usize>, args: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_loopdet"));
    cmd.env("LOOPDET_OUTPUT_ROOT", out).env_remove("LOOPDET_WORKERS");
    if let Some(w) = workers {
        cmd.env("LOOPDET_WORKERS", w.to_string());
    }
    cmd.args(args).output().expect("binary runs")
}

fn run(out: &Path, config: &Path) -> (i32, Output) {
    let o = loopdet(out, Some(1), &[Path::new("run"), config]);
    (o.status.code().expect("exited"), o)
}

fn record(out: &Path, name: &str) -> ResultRecord {
    ResultRecord::load(&out.join(format!("{name}.json"))).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn unknown_key_is_a_schema_error() {
    let tmp = TempDir::new().unwrap();
    let text = std::fs::read_to_string(smoke("campbell.toml"))
        .unwrap()
        .replace("seed = 3", "seed = 3\nsede = 4");
    let cfg = write(tmp.path(), "bad.toml", &text);
    let (code, o) = run(&tmp.path().join("out"), &cfg);
    assert_eq!(code, 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sede"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn io_errors_exit_4() {
    let tmp = TempDir::new().unwrap();
    let (code, _) = run(tmp.path(), &tmp.path().join("missing.toml"));
    assert_eq!(code, 4);
    let blocker = write(tmp.path(), "file", "");
    let (code, _) = run(&blocker, &smoke("campbell.toml"));
    assert_eq!(code, 4);
}

#[test]
fn identical_connections_give_exactly_one() {
    let tmp = TempDir::new().unwrap();
    let (code, _) = run(tmp.path(), &smoke("estimate-same.toml"));
    assert_eq!(code, 0);
    let rec = record(tmp.path(), "estimate-same");
    let q = rec.payload.quantities["abelian.soup"];
    assert_eq!((q.value, q.stderr), (1.0, 0.0));
    assert_eq!(rec.payload.quantities["abelian.oracle"].value, 1.0);

    let path = tmp.path().join("estimate-same.json");
    let o = loopdet(
        tmp.path(),
        None,
        &[
            Path::new("compare"),
            &path,
            &path,
            Path::new("--pair"),
            Path::new("abelian.soup=abelian.oracle"),
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let rows: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rows[0]["z"], 0.0);
}

#[test]
fn campbell_constant_case_within_three_sigma() {
    let tmp = TempDir::new().unwrap();
    let (code, _) = run(tmp.path(), &smoke("campbell.toml"));
    assert_eq!(code, 0);
    let rec = record(tmp.path(), "campbell");
    assert_eq!(rec.status, Status::Pass);
    let q = rec.payload.quantities["mc_re"];
    assert!((q.value - (-1.0f64).exp()).abs() <= 3.0 * q.stderr);
}

#[test]
fn spectral_oracle_is_symmetric_in_theta() {
    let tmp = TempDir::new().unwrap();
    let (code, _) = run(tmp.path(), &smoke("spectral-symmetry.toml"));
    assert_eq!(code, 0);
    let q = &record(tmp.path(), "spectral-symmetry").payload.quantities;
    let (a, b) = (q["plus.zeta_diff"].value, q["minus.zeta_diff"].value);
    assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    assert!(q["plus.oracle"].value < 1.0);
}

#[test]
fn failed_certificate_exits_3_and_keeps_the_record() {
    let tmp = TempDir::new().unwrap();
    let text = std::fs::read_to_string(smoke("campbell.toml"))
        .unwrap()
        .replace("[0.36787944117144233, 0.0]", "[0.5, 0.0]");
    let cfg = write(tmp.path(), "wrong.toml", &text);
    let (code, o) = run(&tmp.path().join("out"), &cfg);
    assert_eq!(code, 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("[FAIL] real part vs expected"));
    let rec = record(&tmp.path().join("out"), "campbell");
    assert_eq!(rec.status, Status::Fail);
    assert!(rec.checks.iter().any(|c| c.pass));
}

#[test]
fn payloads_are_reproducible_across_runs_and_workers() {
    let tmp = TempDir::new().unwrap();
    let mut payloads = Vec::new();
    for (i, workers) in [1, 1, 3].into_iter().enumerate() {
        let out = tmp.path().join(i.to_string());
        let o = loopdet(
            &out,
            Some(workers),
            &[Path::new("run"), &smoke("estimate-abelian.toml")],
        );
        assert_eq!(o.status.code(), Some(0));
        let rec = record(&out, "estimate-abelian");
        assert_eq!(rec.provenance.workers, workers);
        assert_eq!(rec.provenance.seed, 2);
        payloads.push((rec.config_hash.clone(), serde_json::to_string(&rec.payload).unwrap()));
    }
    assert_eq!(payloads[0], payloads[1]);
    assert_eq!(payloads[0], payloads[2]);
}

#[test]
fn compare_identical_and_shifted_records() {
    let tmp = TempDir::new().unwrap();
    let (code, _) = run(tmp.path(), &smoke("estimate-abelian.toml"));
    assert_eq!(code, 0);
    let a = tmp.path().join("estimate-abelian.json");
    let o = loopdet(tmp.path(), None, &[Path::new("compare"), &a, &a]);
    assert_eq!(o.status.code(), Some(0));
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r["z"] == 0.0));

    let mut rec = ResultRecord::load(&a).unwrap();
    let q = rec.payload.quantities.get_mut("abelian.soup").unwrap();
    q.value += 10.0 * q.stderr + q.bias;
    let b = tmp.path().join("shifted.json");
    rec.save(&b).unwrap();
    let o = loopdet(tmp.path(), None, &[Path::new("compare"), &a, &b]);
    assert_eq!(o.status.code(), Some(3));

    let (code, _) = run(tmp.path(), &smoke("campbell.toml"));
    assert_eq!(code, 0);
    let c = tmp.path().join("campbell.json");
    let o = loopdet(tmp.path(), None, &[Path::new("compare"), &a, &c]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn soup_sample_writes_tables_and_a_readable_snapshot() {
    let tmp = TempDir::new().unwrap();
    let (code, _) = run(tmp.path(), &smoke("soup-sample.toml"));
    assert_eq!(code, 0);
    let rec = record(tmp.path(), "soup-sample");
    assert!(rec.payload.files.contains(&"soup-sample.durations.csv".to_string()));
    let csv = std::fs::read_to_string(tmp.path().join("soup-sample.durations.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    let soup = loopdet_core::loopsoup::load_snapshot(&tmp.path().join("soup-sample.soup")).unwrap();
    assert_eq!(soup.config.delta, 1e-2);
    assert!(soup.loops.iter().all(|l| l.is_closed(&soup.torus)));
}

#[test]
fn suite_reports_the_worst_exit_code() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("cfg");
    std::fs::create_dir(&dir).unwrap();
    std::fs::copy(smoke("campbell.toml"), dir.join("a.toml")).unwrap();
    let bad = std::fs::read_to_string(smoke("spectral-symmetry.toml"))
        .unwrap()
        .replace("theta = [-0.3, -0.1]", "theta = [-0.3, 0.2]");
    write(&dir, "b.toml", &bad);
    let o = loopdet(&tmp.path().join("out"), Some(1), &[Path::new("suite"), &dir]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(tmp.path().join("out/campbell.json").exists());
    assert!(tmp.path().join("out/spectral-symmetry.json").exists());
}

#[test]
fn every_shipped_config_parses() {
    let mut kinds = std::collections::BTreeSet::new();
    for dir in ["configs", "configs/smoke"] {
        for entry in std::fs::read_dir(repo().join(dir)).unwrap() {
            let p = entry.unwrap().path();
            if p.extension().is_some_and(|x| x == "toml") {
                let cfg = ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
                kinds.insert(cfg.experiment.kind());
            }
        }
    }
    for kind in [
        "validate-kernel",
        "soup-sample",
        "estimate-det",
        "integral-form",
        "spectral-oracle",
        "moments",
        "symanzik",
        "conformal",
        "campbell",
        "feynman-kac",
        "levy-area",
    ] {
        assert!(kinds.contains(kind), "no shipped config of kind {kind}");
    }
}
