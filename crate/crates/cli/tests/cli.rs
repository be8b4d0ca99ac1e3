use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn oqbm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oqbm")).args(args).env_remove("OQBM_THREADS").output().expect("binary runs")
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).to_string_lossy().into_owned()
}

fn read_json(p: PathBuf) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).unwrap()
}

fn header(p: PathBuf) -> String {
    std::fs::read_to_string(p).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = oqbm(&["simulate", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_exits_zero() {
    assert_eq!(oqbm(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 1, "seed": 1}"#).unwrap();
    let out = oqbm(&["simulate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(oqbm(&["simulate"]).status.code(), Some(1));
    let missing = oqbm(&["simulate", "--config", "/nonexistent/run.json"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // A regular file where the output directory should go.
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "").unwrap();
    let out =
        oqbm(&["verify-ito", "--dims", "2", "--nbar", "0", "--instances", "1", "--out", blocker.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_ito_writes_a_residual_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = oqbm(&["verify-ito", "--dims", "2,4,8", "--nbar", "0,1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("ito_residuals.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "dim,nbar,seed,leibniz,duality,unitarity,fit_nbar_error,fit_consistency,fit_residual"
    );
    assert_eq!(lines.count(), 3 * 2 * 3);
    let summary = read_json(dir.path().join("summary.json"));
    for k in ["max_leibniz", "max_duality", "max_unitarity"] {
        assert!(summary["metrics"][k].as_f64().unwrap() < 1e-9, "{k}");
    }
}

#[test]
fn simulate_is_reproducible_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = config("baseline_trajectory.json");
    let common = ["--ensemble", "40", "--horizon", "0.2"];
    let run = |dir: &Path, threads: &str| {
        let mut args = vec!["simulate", "--config", &cfg, "--threads", threads, "--out", dir.to_str().unwrap()];
        args.extend(common);
        let out = oqbm(&args);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(a.path(), "1");
    run(b.path(), "3");
    for f in ["summary.json", "histograms.jsonl", "moments.csv", "paths.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let (ma, mb) = (read_json(a.path().join("manifest.json")), read_json(b.path().join("manifest.json")));
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["seed"], 404);
    assert_eq!(header(a.path().join("paths.csv")), "stream,t,x,purity,q1,q2,q3");
    assert_eq!(header(a.path().join("moments.csv")), "t,mean,var,count");
}

#[test]
fn seed_override_changes_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = config("baseline_trajectory.json");
    for (dir, seed) in [(a.path(), "1"), (b.path(), "2")] {
        let out = oqbm(&[
            "simulate",
            "--config",
            &cfg,
            "--ensemble",
            "10",
            "--horizon",
            "0.1",
            "--seed",
            seed,
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    assert_ne!(
        std::fs::read(a.path().join("summary.json")).unwrap(),
        std::fs::read(b.path().join("summary.json")).unwrap()
    );
}

#[test]
fn lindblad_accepts_a_trajectory_config() {
    let dir = tempfile::tempdir().unwrap();
    let out =
        oqbm(&["lindblad", "--config", &config("baseline_trajectory.json"), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(header(dir.path().join("field_snapshots.csv")), "t,x,trace,q1,q2,q3");
    let summary = read_json(dir.path().join("summary.json"));
    let last = summary["moments"].as_array().unwrap().last().unwrap().clone();
    assert!((last["t"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn spin_half_emits_paths_waits_and_potential() {
    let dir = tempfile::tempdir().unwrap();
    let out = oqbm(&[
        "spin-half",
        "--a",
        "2",
        "--omega0",
        "1",
        "--ensemble",
        "4",
        "--horizon",
        "20",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(header(dir.path().join("spin_paths.csv")), "stream,t,theta,q1,q3,x");
    assert_eq!(header(dir.path().join("waiting_times.csv")), "stream,index,wait");
    assert_eq!(header(dir.path().join("potential.csv")), "theta,w,invariant_density,occupation");
    let summary = read_json(dir.path().join("summary.json"));
    assert!(summary["metrics"]["tau_quadrature"].as_f64().unwrap() > 0.0);
}

#[test]
fn spin_half_rejects_invalid_coupling() {
    assert_eq!(oqbm(&["spin-half", "--omega0", "0", "--ensemble", "1"]).status.code(), Some(1));
}

#[test]
fn collapse_stats_reports_tv_distance() {
    let dir = tempfile::tempdir().unwrap();
    let out = oqbm(&["collapse-stats", "--ensemble", "50", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(header(dir.path().join("collapse_runs.csv")), "stream,peak,steps,peak_mass");
    let summary = read_json(dir.path().join("summary.json"));
    let tv = summary["metrics"]["tv_distance"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&tv));
    let hist = &summary["histograms"][0];
    let total: u64 = hist["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum::<u64>()
        + hist["underflow"].as_u64().unwrap()
        + hist["overflow"].as_u64().unwrap();
    assert_eq!(total, 50);
}

#[test]
fn compare_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = oqbm(&[
        "compare",
        "--config",
        &config("baseline_trajectory.json"),
        "--ensemble",
        "2000",
        "--dt",
        "0.004",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(dir.path().join("compare_report.json"));
    assert_eq!(report["paths"], 2000);
    assert!(report["sup_matrix"].as_f64().unwrap() <= 5e-2, "{report}");
}

#[test]
fn shipped_configs_validate() {
    for entry in std::fs::read_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")).unwrap() {
        let p = entry.unwrap().path();
        let text = std::fs::read_to_string(&p).unwrap();
        oqbm::harness::RunConfig::from_json(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}
