use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn case(name: &str) -> PathBuf {
    repo().join("cases").join(name)
}

fn rmt_se(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmt-se"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn small_config(dir: &Path, case_name: &str) -> PathBuf {
    let path = dir.join("cfg.toml");
    let body = format!(
        "case_path = {:?}\nscenario = \"baseline\"\ntrials = 2\nseed = 5\n",
        case(case_name).to_str().unwrap()
    );
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn powerflow_writes_every_bus() {
    let dir = tempfile::tempdir().unwrap();
    let out = rmt_se(&["powerflow", case("case30.m").to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    let stdout = ok(&out);
    assert!(stdout.contains("30 buses"), "{stdout}");
    let csv = std::fs::read_to_string(dir.path().join("powerflow.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("bus,vm,va"));
    assert_eq!(lines.count(), 30);
}

#[test]
fn run_writes_baseline_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "case30.m");
    let out_dir = dir.path().join("report");
    let out = rmt_se(&[
        "run",
        cfg.to_str().unwrap(),
        "--trials",
        "1",
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    let stdout = ok(&out);
    assert!(stdout.starts_with("baseline"), "{stdout}");
    let trials = std::fs::read_to_string(out_dir.join("trials.csv")).unwrap();
    let mut lines = trials.lines();
    assert_eq!(
        lines.next(),
        Some("trial,seed,wls_mae,rwls_mae,meas_mae_raw,meas_mae_clean,iters,wall_ms")
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..2], &["0", "5"]);
    assert!(lines.next().is_none());
    assert!(!out_dir.join("report.json").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "case30.m");
    let out_dir = dir.path().join("report");
    let out = rmt_se(&[
        "run",
        cfg.to_str().unwrap(),
        "--trials",
        "1",
        "--seed",
        "11",
        "--format",
        "json",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    ok(&out);
    let json = std::fs::read_to_string(out_dir.join("report.json")).unwrap();
    let report = rmt_se::harness::ExperimentReport::from_json(&json).unwrap();
    assert_eq!(report.config.seed, 11);
    assert_eq!(report.groups[0].trials.len(), 1);
}

#[test]
fn window_round_trip_through_clean_and_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "case30.m");
    let win = dir.path().join("w.csv");
    let out = rmt_se(&["window", cfg.to_str().unwrap(), "--trial", "1", "--out", win.to_str().unwrap()]);
    assert!(ok(&out).contains("254 variables x 305 samples"));
    assert!(dir.path().join("w.json").exists());

    let out_dir = dir.path().join("clean");
    let out = rmt_se(&[
        "clean",
        win.to_str().unwrap(),
        "--case",
        case("case30.m").to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(ok(&out).contains("converged true"));
    let cleaned = std::fs::read_to_string(out_dir.join("cleaned.csv")).unwrap();
    assert_eq!(cleaned.lines().count(), 255);
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("estimate.json")).unwrap()).unwrap();
    assert_eq!(record["estimate"]["state"]["vm"].as_array().unwrap().len(), 30);

    let out = rmt_se(&["spectrum", win.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert!(ok(&out).contains("N = 254, T = 305"));
    let spectrum = std::fs::read_to_string(out_dir.join("spectrum.csv")).unwrap();
    assert_eq!(spectrum.lines().next(), Some("lambda,h,rho,xi,mp_density"));
    assert_eq!(spectrum.lines().count(), 255);
}

#[test]
fn clean_rejects_window_from_another_case() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "case30.m");
    let win = dir.path().join("w.csv");
    ok(&rmt_se(&["window", cfg.to_str().unwrap(), "--out", win.to_str().unwrap()]));
    let out = rmt_se(&[
        "clean",
        win.to_str().unwrap(),
        "--case",
        case("case57.m").to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("measurement plan"));
}

#[test]
fn large_case_needs_extended_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "case1354pegase.m");
    let out = rmt_se(&["window", cfg.to_str().unwrap(), "--out", dir.path().join("w.csv").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("extended"));
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "case_path = \"x.m\"\nscenario = \"baseline\"\ntrails = 3\n").unwrap();
    let out = rmt_se(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trails"));
}

#[test]
fn shipped_configs_parse() {
    let dir = repo().join("configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let cfg = rmt_se::harness::ExperimentConfig::from_path(&path)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(cfg.case_path.exists(), "{}", path.display());
        n += 1;
    }
    assert!(n >= 21, "only {n} configs");
}
