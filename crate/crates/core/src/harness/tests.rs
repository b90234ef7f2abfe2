use super::*;
use rand::Rng;
use crate::grid::fixtures;
use proptest::prelude::*;

fn config(scenario: Scenario) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(fixtures::case_path("case30.m"), scenario);
    cfg.trials = 3;
    cfg.seed = 42;
    cfg
}

fn metrics(g: &GroupReport) -> Vec<TrialMetrics> {
    g.trials.iter().map(|t| t.metrics.clone().expect("trial succeeded")).collect()
}

#[test]
fn mae_of_equal_vectors_is_zero() {
    assert_eq!(mae(&[1.0, 2.5, -3.0], &[1.0, 2.5, -3.0]).unwrap(), 0.0);
}

#[test]
fn mae_by_hand() {
    assert_eq!(mae(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
}

#[test]
fn mae_rejects_bad_input() {
    assert!(matches!(mae(&[1.0], &[1.0, 2.0]), Err(HarnessError::Length(1, 2))));
    assert!(matches!(mae(&[], &[]), Err(HarnessError::Empty)));
}

proptest! {
    #[test]
    fn mae_matches_loop(pairs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..200)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += (a[i] - b[i]).abs();
        }
        let expected = acc / a.len() as f64;
        let got = mae(&a, &b).unwrap();
        prop_assert!((got - expected).abs() <= 1e-15 * expected.max(1.0));
    }
}

#[test]
fn improvement_ratio_by_hand() {
    assert!((inc_rat(0.02, 0.01) - 0.5).abs() < 1e-15);
}

#[test]
fn window_length_rounds() {
    assert_eq!(window_len(1.2, 254), 305);
    assert_eq!(window_len(0.5, 254), 127);
    assert_eq!(window_len(1e-6, 3), 2);
}

#[test]
fn trial_streams_differ() {
    let a: u64 = trial_rng(7, 0).random();
    let b: u64 = trial_rng(7, 1).random();
    assert_ne!(a, b);
    assert_eq!(a, trial_rng(7, 0).random::<u64>());
}

#[test]
fn noiseless_config_recovers_truth() {
    let mut cfg = config(Scenario::Baseline);
    cfg.noise.flow_pct = 0.0;
    cfg.noise.vm_pct = 0.0;
    cfg.noise.bias_range = 0.0;
    let report = run_baseline(&cfg).unwrap();
    for m in metrics(&report.groups[0]) {
        assert!(m.wls_mae < 1e-6 && m.rwls_mae < 1e-6, "{m:?}");
    }
}

#[test]
fn baseline_improves_on_raw_estimate() {
    let report = run_baseline(&config(Scenario::Baseline)).unwrap();
    let g = &report.groups[0];
    assert_eq!(g.n_samples, 305);
    let a = g.aggregate.as_ref().unwrap();
    assert_eq!(a.n_ok, 3);
    assert!(a.rwls_mae < a.wls_mae, "{a:?}");
    assert!(a.meas_mae_clean < a.meas_mae_debiased);
    assert_eq!(a.per_kind.len(), 7);
    assert_eq!(g.spectrum.len(), 254);
    assert_eq!(g.trace.len(), 254);
}

#[test]
fn aggregate_is_trial_mean() {
    let report = run_baseline(&config(Scenario::Baseline)).unwrap();
    let g = &report.groups[0];
    let m = metrics(g);
    let mean = m.iter().map(|t| t.rwls_mae).sum::<f64>() / m.len() as f64;
    assert_eq!(g.aggregate.as_ref().unwrap().rwls_mae, mean);
}

#[test]
fn runs_are_deterministic() {
    let cfg = config(Scenario::Baseline);
    let a = run_baseline(&cfg).unwrap().without_timings().to_json();
    let b = run_baseline(&cfg).unwrap().without_timings().to_json();
    assert_eq!(a, b);
}

#[test]
fn exported_window_reproduces_trial_cleaning() {
    let cfg = config(Scenario::Baseline);
    let exp = Experiment::prepare(&cfg).unwrap();
    let report = exp.run().unwrap();
    let window = exp.synthetic_window(1).unwrap();
    assert_eq!(window.n_samples(), 305);
    assert_eq!(window.meta().seed, Some(42));
    let cleaned = clean_window(&window, &cfg.cleaning).unwrap();
    let m = metrics(&report.groups[0]);
    assert_eq!(mae(&cleaned.measurements, &exp.truth().measurements).unwrap(), m[1].meas_mae_clean);
    let raw = mae(&window.raw_column(304), &exp.truth().measurements).unwrap();
    assert!((raw - m[1].meas_mae_raw).abs() < 1e-14);
}

#[test]
fn sweep_entry_matches_baseline() {
    let base = run_baseline(&config(Scenario::Baseline)).unwrap();
    let mut cfg = config(Scenario::QSweep);
    cfg.q_sweep.ratios = vec![0.5, 1.2];
    let sweep = run_q_sweep(&cfg).unwrap();
    let point = sweep.group("r=1.2").unwrap();
    assert_eq!(metrics(point), metrics(&base.groups[0]));
    assert!(!point.degraded);

    let low = sweep.group("r=0.5").unwrap();
    assert!(low.degraded);
    assert!(!low.notes.is_empty());
    for m in metrics(low) {
        assert!(m.cleaning_refused);
        assert_eq!(m.wls_mae, m.rwls_mae);
    }
}

#[test]
fn single_group_partition_matches_baseline() {
    let base = run_baseline(&config(Scenario::Baseline)).unwrap();
    let mut cfg = config(Scenario::Divided);
    cfg.divided.groups = vec![MeasurementKind::ALL.to_vec()];
    let report = run_divided(&cfg).unwrap();
    let divided = report.group("divided").unwrap();
    assert_eq!(metrics(divided), metrics(&base.groups[0]));
    assert_eq!(metrics(report.group("undivided").unwrap()), metrics(&base.groups[0]));
    assert_eq!(divided.partition.len(), 1);
}

#[test]
fn seven_groups_have_kind_sizes() {
    let report = run_divided(&config(Scenario::Divided)).unwrap();
    let part = &report.group("divided").unwrap().partition;
    let sizes: Vec<(usize, usize)> = part.iter().map(|p| (p.n_vars, p.n_samples)).collect();
    assert_eq!(sizes, vec![(41, 49), (41, 49), (30, 36), (41, 49), (41, 49), (30, 36), (30, 36)]);
}

#[test]
fn zero_variance_error_matches_baseline() {
    let base = run_baseline(&config(Scenario::Baseline)).unwrap();
    let mut cfg = config(Scenario::VarianceError);
    cfg.variance_error.ratios = vec![0.0, 0.3];
    cfg.variance_error.sign = ErrorSign::Random;
    let report = run_variance_error(&cfg).unwrap();
    assert_eq!(metrics(report.group("ratio=0").unwrap()), metrics(&base.groups[0]));
}

#[test]
fn constant_profile_matches_baseline() {
    let base = run_baseline(&config(Scenario::Baseline)).unwrap();
    let mut cfg = config(Scenario::TimeVarying);
    cfg.time_varying.steps = 1;
    cfg.time_varying.profiles = vec![LoadProfile {
        bus: 7,
        shape: ProfileShape::Constant,
    }];
    let report = run_time_varying(&cfg).unwrap();
    assert_eq!(report.groups.len(), 1);
    assert_eq!(metrics(&report.groups[0]), metrics(&base.groups[0]));
}

#[test]
fn ramped_columns_balance_power() {
    let mut cfg = config(Scenario::TimeVarying);
    cfg.time_varying.profiles = vec![
        LoadProfile {
            bus: 7,
            shape: ProfileShape::Ramp { total_change: 0.3 },
        },
        LoadProfile {
            bus: 30,
            shape: ProfileShape::Sine {
                amplitude: 0.1,
                period: 100.0,
            },
        },
    ];
    let exp = Experiment::prepare(&cfg).unwrap();
    let truths = exp.column_truths(40).unwrap();
    assert!(truths.iter().all(|c| c.mismatch < 1e-8));
    assert_ne!(truths[0].measurements, truths[39].measurements);
    assert_eq!(truths[0].measurements, exp.truth().measurements);
}

#[test]
fn time_steps_are_reported() {
    let mut cfg = config(Scenario::TimeVarying);
    cfg.trials = 2;
    cfg.time_varying.steps = 3;
    cfg.time_varying.profiles = vec![LoadProfile {
        bus: 7,
        shape: ProfileShape::Ramp { total_change: 0.2 },
    }];
    let report = run_time_varying(&cfg).unwrap();
    let labels: Vec<&str> = report.groups.iter().map(|g| g.label.as_str()).collect();
    assert_eq!(labels, ["step=0", "step=1", "step=2"]);
    assert!(report.groups.iter().all(|g| g.aggregate.as_ref().unwrap().n_ok == 2));
}

#[test]
fn unknown_profile_bus_is_rejected() {
    let mut cfg = config(Scenario::TimeVarying);
    cfg.time_varying.profiles = vec![LoadProfile {
        bus: 999,
        shape: ProfileShape::Constant,
    }];
    assert!(matches!(run_time_varying(&cfg), Err(HarnessError::Config(_))));
}

#[test]
fn large_case_needs_extended_flag() {
    let cfg = ExperimentConfig::new(fixtures::case_path("case1354pegase.m"), Scenario::Baseline);
    assert!(matches!(
        Experiment::prepare(&cfg),
        Err(HarnessError::ExtendedCase { n_bus: 1354 })
    ));
}

#[test]
fn config_validation() {
    let mut cfg = config(Scenario::Baseline);
    cfg.trials = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = config(Scenario::Baseline);
    cfg.window_ratio = 0.0;
    assert!(cfg.validate().is_err());
    let mut cfg = config(Scenario::Baseline);
    cfg.noise.flow_pct = -0.1;
    assert!(cfg.validate().is_err());
    let mut cfg = config(Scenario::Divided);
    cfg.divided.groups = vec![vec![MeasurementKind::Pt], vec![MeasurementKind::Pt]];
    assert!(cfg.validate().is_err());
}

#[test]
fn config_toml_round_trip() {
    let mut cfg = config(Scenario::TimeVarying);
    cfg.time_varying.profiles = vec![LoadProfile {
        bus: 7,
        shape: ProfileShape::Sine {
            amplitude: 0.1,
            period: 50.0,
        },
    }];
    let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn minimal_toml_uses_defaults() {
    let cfg = ExperimentConfig::from_toml_str("case_path = \"case30.m\"\nscenario = \"baseline\"\n").unwrap();
    assert_eq!(cfg.trials, 10);
    assert_eq!(cfg.window_ratio, 1.2);
    assert_eq!(cfg.noise.flow_pct, 0.05);
    assert!(ExperimentConfig::from_toml_str("case_path = \"x\"\nscenario = \"baseline\"\ntypo = 1\n").is_err());
}

#[test]
fn json_report_round_trips() {
    let report = run_baseline(&config(Scenario::Baseline)).unwrap();
    let back = ExperimentReport::from_json(&report.to_json()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn baseline_csv_schema() {
    let report = run_baseline(&config(Scenario::Baseline)).unwrap();
    let csv = report.trials_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "trial,seed,wls_mae,rwls_mae,meas_mae_raw,meas_mae_clean,iters,wall_ms"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 8);
    assert_eq!(row[0], "0");
    let wls: f64 = row[2].parse().unwrap();
    assert_eq!(wls, report.groups[0].trials[0].metrics.as_ref().unwrap().wls_mae);
}

#[test]
fn empty_report_writes_headers_only() {
    let mut report = run_baseline(&config(Scenario::Baseline)).unwrap();
    report.groups.clear();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&report, ReportFormat::Csv, dir.path()).unwrap();
    assert_eq!(files.len(), 5);
    for f in files {
        let text = std::fs::read_to_string(&f).unwrap();
        assert_eq!(text.lines().count(), 1, "{}", f.display());
    }
}

#[test]
fn emitted_json_parses_back() {
    let report = run_baseline(&config(Scenario::Baseline)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(&report, ReportFormat::Json, dir.path()).unwrap();
    let text = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(ExperimentReport::from_json(&text).unwrap(), report);
}

#[test]
fn failed_trial_is_recorded() {
    let mut cfg = config(Scenario::Baseline);
    cfg.wls.init = crate::estimator::InitStrategy::Given {
        state: OperatingState::flat(5),
    };
    let report = run_baseline(&cfg).unwrap();
    let g = &report.groups[0];
    assert!(g.aggregate.is_none());
    assert!(g.trials.iter().all(|t| t.error.is_some() && t.metrics.is_none()));
    let summary = report.summary_csv();
    assert!(summary.lines().nth(1).unwrap().starts_with("baseline,"));
}
