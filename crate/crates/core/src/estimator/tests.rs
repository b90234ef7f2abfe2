use super::*;
use crate::grid::fixtures;
use crate::noise::{build_window, draw_bias, sample_noise, sigma_from_truth, NoiseModel, NoiseSpec, SigmaMode, SIGMA_FLOOR};
use crate::powerflow::{solve_power_flow, Measurement};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn truth(name: &str) -> (GridCase, Estimator, OperatingState, Vec<f64>) {
    let case = fixtures::load(name);
    let est = Estimator::new(&case, MeasurementPlan::full_scada(&case)).unwrap();
    let state = solve_power_flow(&case, est.admittance()).unwrap().state;
    let h = est.measure(&state);
    (case, est, state, h)
}

fn max_state_gap(a: &OperatingState, b: &OperatingState) -> f64 {
    a.stacked()
        .iter()
        .zip(b.stacked())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn exact_measurements_recover_state() {
    let (_, est, x_true, h) = truth("case30.m");
    let sigma = vec![0.01; h.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = WlsConfig::default();
    let start = est.initial_state(&cfg.init, &mut rng).unwrap();
    let out = est.wls(&h, &sigma, &cfg, &start).unwrap();
    assert!(out.converged);
    assert!(max_state_gap(&out.state, &x_true) < 1e-6);
}

#[test]
fn objective_matches_weighted_residual() {
    let (_, est, _, h) = truth("case30.m");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sigma = sigma_from_truth(&h, 0.05, SigmaMode::StdFraction, SIGMA_FLOOR);
    let spec = NoiseSpec::new(NoiseModel::Gaussian, sigma.clone(), vec![0.0; h.len()]).unwrap();
    let z: Vec<f64> = h.iter().zip(sample_noise(&spec, &mut rng)).map(|(h, e)| h + e).collect();
    let cfg = WlsConfig::default();
    let start = est.initial_state(&cfg.init, &mut rng).unwrap();
    let out = est.wls(&z, &sigma, &cfg, &start).unwrap();
    let j: f64 = out.residual.iter().zip(&out.weights).map(|(r, w)| w * r * r).sum();
    assert!((j - out.objective).abs() <= 1e-12 * j);
    // Stored residual agrees with h(x_hat) recomputed from the returned state.
    let h_hat = est.measure(&out.state);
    for ((z, r), hh) in z.iter().zip(&out.residual).zip(&h_hat) {
        assert!((z - r - hh).abs() < 1e-12 * (1.0 + hh.abs()));
    }
    assert!(out.objective_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
}

#[test]
fn duplicated_rows_leave_estimate_unchanged() {
    let (case, est, _, h) = truth("case30.m");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sigma = sigma_from_truth(&h, 0.02, SigmaMode::StdFraction, SIGMA_FLOOR);
    let spec = NoiseSpec::new(NoiseModel::Gaussian, sigma.clone(), vec![0.0; h.len()]).unwrap();
    let z: Vec<f64> = h.iter().zip(sample_noise(&spec, &mut rng)).map(|(h, e)| h + e).collect();
    let cfg = WlsConfig {
        init: InitStrategy::Flat,
        ..Default::default()
    };
    let start = est.initial_state(&cfg.init, &mut rng).unwrap();
    let single = est.wls(&z, &sigma, &cfg, &start).unwrap();

    let entries: Vec<Measurement> = est.plan().entries().iter().flat_map(|m| [*m, *m]).collect();
    let doubled = Estimator::new(&case, MeasurementPlan::from_entries(entries)).unwrap();
    let z2: Vec<f64> = z.iter().flat_map(|v| [*v, *v]).collect();
    let s2: Vec<f64> = sigma.iter().flat_map(|v| [*v, *v]).collect();
    let twice = doubled.wls(&z2, &s2, &cfg, &start).unwrap();
    assert!(max_state_gap(&single.state, &twice.state) < 1e-10);
}

#[test]
fn voltage_only_plan_is_unobservable() {
    let case = fixtures::load("case30.m");
    let mut entries: Vec<Measurement> = (0..30)
        .map(|index| Measurement {
            kind: crate::powerflow::MeasurementKind::Vm,
            index,
        })
        .collect();
    entries.extend(entries.clone());
    let est = Estimator::new(&case, MeasurementPlan::from_entries(entries)).unwrap();
    let z = vec![1.0; 60];
    let err = est
        .wls(&z, &[0.01; 60], &WlsConfig::default(), &OperatingState::flat(30))
        .unwrap_err();
    assert!(matches!(err, EstimatorError::Unobservable { .. }), "{err}");
}

#[test]
fn too_short_plan_is_rejected() {
    let case = fixtures::load("case30.m");
    let plan = MeasurementPlan::from_entries(vec![Measurement {
        kind: crate::powerflow::MeasurementKind::Vm,
        index: 0,
    }]);
    assert!(matches!(
        Estimator::new(&case, plan),
        Err(EstimatorError::TooFewMeasurements { m: 1, n: 59 })
    ));
}

#[test]
fn perfect_estimate_has_no_estimated_error() {
    let h = [1.0, -0.5, 0.2];
    let z = [1.1, -0.4, 0.1];
    let d = error_decomposition(&z, &h, &h, &[1.0, 2.0, 3.0]).unwrap();
    assert_eq!(d.estimated_error, vec![0.0; 3]);
    assert_eq!(d.residual, d.measurement_error);
}

#[test]
fn decomposition_triangle_inequality() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let v = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..20).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (z, h, hh) = (v(&mut rng), v(&mut rng), v(&mut rng));
        let w: Vec<f64> = (0..20).map(|_| rng.random_range(0.1..5.0)).collect();
        let d = error_decomposition(&z, &h, &hh, &w).unwrap();
        for n in [d.l1, d.l2] {
            assert!(n.estimated <= n.residual + n.measurement + 1e-12);
        }
    }
}

#[test]
fn noiseless_window_only_rescales_snapshot() {
    let (_, est, _, h) = truth("case30.m");
    let n = h.len();
    let sigma = sigma_from_truth(&h, 0.05, SigmaMode::StdFraction, SIGMA_FLOOR);
    let spec = NoiseSpec::new(NoiseModel::Gaussian, sigma.clone(), vec![0.0; n]).unwrap();
    let window = build_window(&vec![h.clone(); 305], &spec, est.plan()).unwrap();
    let cfg = WlsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let start = est.initial_state(&cfg.init, &mut rng).unwrap();
    let plain = est.wls(&h, &sigma, &cfg, &start).unwrap();
    let two = est.rwls(&window, &CleanConfig::default(), &cfg, &start).unwrap();
    // A rank-one window keeps its direction; only the spike is rescaled.
    let top = two.cleaning.eigen.last().unwrap();
    let scale = (top.xi / top.lambda).sqrt();
    assert!((1.0 - scale).abs() < 1e-4, "{top:?}");
    for (c, hv) in two.cleaning.measurements.iter().zip(&h) {
        assert!((c - scale * hv).abs() < 1e-9 * (1.0 + hv.abs()), "{c} vs {}", scale * hv);
    }
    assert!(max_state_gap(&plain.state, &two.estimate.state) < 1e-4);
}

/// Under the standard noise setup some estimated-measurement errors are far
/// larger than typical residuals.
#[test]
fn estimated_error_outgrows_residuals() {
    let (_, est, _, h) = truth("case30.m");
    let n = h.len();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let bias = draw_bias(n, 0.03, &mut rng);
    let sigma = sigma_from_truth(&h, 0.05, SigmaMode::StdFraction, SIGMA_FLOOR);
    let spec = NoiseSpec::new(NoiseModel::Gaussian, sigma.clone(), bias).unwrap();
    let z: Vec<f64> = h.iter().zip(sample_noise(&spec, &mut rng)).map(|(h, e)| h + e).collect();
    let cfg = WlsConfig::default();
    let start = est.initial_state(&cfg.init, &mut rng).unwrap();
    let out = est.wls(&z, &sigma, &cfg, &start).unwrap();
    let h_hat = est.measure(&out.state);
    let d = error_decomposition(&z, &h, &h_hat, &out.weights).unwrap();
    let mut r: Vec<f64> = d.residual.iter().map(|x| x.abs()).collect();
    r.sort_by(f64::total_cmp);
    let median = r[r.len() / 2];
    let worst = d.estimated_error.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(worst > 3.0 * median, "{worst} vs median residual {median}");
}

#[test]
fn record_serializes_with_provenance() {
    let (_, est, x, h) = truth("case30.m");
    let cfg = WlsConfig {
        init: InitStrategy::Given { state: x.clone() },
        ..Default::default()
    };
    let out = est.wls(&h, &vec![0.01; h.len()], &cfg, &x).unwrap();
    let rec = EstimateRecord::new(&est, Some(9), &cfg, out);
    let json = rec.to_json();
    let back: EstimateRecord = serde_json::from_str(&json).unwrap();
    assert_eq!(back.case_hash, est.case_hash());
    assert_eq!(back.seed, Some(9));
    assert_eq!(back.estimate, rec.estimate);
}
