//! Weighted least squares state estimation and the two-stage pipeline that
//! cleans the measurement window first.

use faer::{Mat, Side};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{build_admittance, AdmittanceMatrix, CaseError, GridCase};
use crate::noise::MeasurementWindow;
use crate::powerflow::{
    measurement_function, measurement_jacobian, MeasurementPlan, OperatingState, PlanError, StateLayout,
};
use crate::rmt::{clean_window, CleanConfig, RmtError, WindowCleaning};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("gain matrix is not positive definite: state column {column} is unobservable")]
    Unobservable { column: usize },
    #[error("{what} has length {found}, expected {expected}")]
    Length {
        what: &'static str,
        found: usize,
        expected: usize,
    },
    #[error("plan has {m} measurements for {n} state variables")]
    TooFewMeasurements { m: usize, n: usize },
    #[error("sigma at position {0} is not positive")]
    BadSigma(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Cleaning(#[from] RmtError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    /// Magnitudes `N(vm_mean, vm_std)`; angles `N(va_mean, va_std)` relative
    /// to the reference angle.
    Random {
        vm_mean: f64,
        vm_std: f64,
        va_mean: f64,
        va_std: f64,
    },
    Flat,
    Given { state: OperatingState },
}

impl Default for InitStrategy {
    fn default() -> Self {
        InitStrategy::Random {
            vm_mean: 1.0,
            vm_std: 0.05,
            va_mean: 0.0,
            // 0.157 degrees.
            va_std: 0.157f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WlsConfig {
    /// Stop once `max |dx| < tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Cholesky pivots below `pivot_tol * G_kk` flag column `k` as unobservable.
    pub pivot_tol: f64,
    pub init: InitStrategy,
}

impl Default for WlsConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 50,
            max_halvings: 10,
            pivot_tol: 1e-10,
            init: InitStrategy::default(),
        }
    }
}

impl WlsConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.tol > 0.0) {
            return Err(EstimatorError::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if let InitStrategy::Random { vm_std, va_std, .. } = self.init {
            if !(vm_std >= 0.0 && va_std >= 0.0) {
                return Err(EstimatorError::Config("initialization spreads must be non-negative".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEstimate {
    pub state: OperatingState,
    pub iterations: usize,
    pub converged: bool,
    /// `sum_i w_i r_i^2` at the returned state.
    pub objective: f64,
    /// Objective at the start point and after every accepted step.
    pub objective_history: Vec<f64>,
    /// `z - h(x_hat)`.
    pub residual: Vec<f64>,
    /// `1 / sigma_i^2`.
    pub weights: Vec<f64>,
}

/// Case data prepared once and shared by repeated estimates.
#[derive(Debug, Clone)]
pub struct Estimator {
    ybus: AdmittanceMatrix,
    plan: MeasurementPlan,
    layout: StateLayout,
    case_hash: String,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, d| m.max(d.abs()))
}

fn weighted_sse(z: &[f64], h: &[f64], w: &[f64]) -> f64 {
    z.iter().zip(h).zip(w).map(|((z, h), w)| w * (z - h).powi(2)).sum()
}

impl Estimator {
    pub fn new(case: &GridCase, plan: MeasurementPlan) -> Result<Self, EstimatorError> {
        plan.validate(case.n_bus(), case.n_branch())?;
        let layout = StateLayout::for_case(case);
        if plan.len() < layout.n_state() {
            return Err(EstimatorError::TooFewMeasurements {
                m: plan.len(),
                n: layout.n_state(),
            });
        }
        Ok(Self {
            ybus: build_admittance(case)?,
            plan,
            layout,
            case_hash: case.content_hash(),
        })
    }

    pub fn plan(&self) -> &MeasurementPlan {
        &self.plan
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    pub fn admittance(&self) -> &AdmittanceMatrix {
        &self.ybus
    }

    pub fn case_hash(&self) -> &str {
        &self.case_hash
    }

    pub fn measure(&self, state: &OperatingState) -> Vec<f64> {
        measurement_function(&self.ybus, &self.plan, state)
    }

    /// Draws (or returns) the starting point described by `init`.
    pub fn initial_state<R: Rng + ?Sized>(&self, init: &InitStrategy, rng: &mut R) -> Result<OperatingState, EstimatorError> {
        let n = self.layout.n_bus;
        let reference = self.layout.reference_angle;
        match init {
            InitStrategy::Flat => OperatingState::new(vec![1.0; n], vec![reference; n])
                .map_err(|e| EstimatorError::Config(e.to_string())),
            InitStrategy::Given { state } => {
                if state.n_bus() != n {
                    return Err(EstimatorError::Length {
                        what: "initial state",
                        found: state.n_bus(),
                        expected: n,
                    });
                }
                Ok(state.clone())
            }
            InitStrategy::Random {
                vm_mean,
                vm_std,
                va_mean,
                va_std,
            } => {
                let vm_dist = Normal::new(*vm_mean, *vm_std).map_err(|e| EstimatorError::Config(e.to_string()))?;
                let va_dist = Normal::new(*va_mean, *va_std).map_err(|e| EstimatorError::Config(e.to_string()))?;
                let vm: Vec<f64> = (0..n).map(|_| vm_dist.sample(rng).max(0.5)).collect();
                let mut va: Vec<f64> = (0..n).map(|_| reference + va_dist.sample(rng)).collect();
                va[self.layout.slack] = reference;
                OperatingState::new(vm, va).map_err(|e| EstimatorError::Config(e.to_string()))
            }
        }
    }

    fn check_inputs(&self, z: &[f64], sigma: &[f64]) -> Result<(), EstimatorError> {
        let m = self.plan.len();
        for (what, v) in [("measurement vector", z), ("sigma", sigma)] {
            if v.len() != m {
                return Err(EstimatorError::Length {
                    what,
                    found: v.len(),
                    expected: m,
                });
            }
        }
        if let Some(i) = sigma.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(EstimatorError::BadSigma(i));
        }
        Ok(())
    }

    /// Gauss-Newton on `H^T W H dx = H^T W (z - h(x))` with step halving
    /// whenever the objective would increase.
    pub fn wls(
        &self,
        z: &[f64],
        sigma: &[f64],
        cfg: &WlsConfig,
        start: &OperatingState,
    ) -> Result<StateEstimate, EstimatorError> {
        cfg.validate()?;
        self.check_inputs(z, sigma)?;
        let weights: Vec<f64> = sigma.iter().map(|s| 1.0 / (s * s)).collect();
        let n = self.layout.n_state();

        let mut x = self.layout.to_vector(start);
        let mut h = self.measure(&self.layout.to_state(&x));
        let mut objective = weighted_sse(z, &h, &weights);
        let mut history = vec![objective];
        let mut converged = false;
        let mut iterations = 0;

        while iterations < cfg.max_iter {
            let state = self.layout.to_state(&x);
            let jac = measurement_jacobian(&self.ybus, &self.plan, &state, &self.layout);
            let mut gain = Mat::<f64>::zeros(n, n);
            let mut rhs = Mat::<f64>::zeros(n, 1);
            for (r, row) in jac.rows().iter().enumerate() {
                let w = weights[r];
                let wr = w * (z[r] - h[r]);
                for &(a, va) in row {
                    rhs[(a, 0)] += va * wr;
                    let wa = w * va;
                    for &(b, vb) in row {
                        if b <= a {
                            gain[(a, b)] += wa * vb;
                        }
                    }
                }
            }
            iterations += 1;

            let dx = solve_spd(&gain, &rhs, cfg.pivot_tol)?;
            let full_step = max_abs(&dx);
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..=cfg.max_halvings {
                let trial: Vec<f64> = x.iter().zip(&dx).map(|(x, d)| x + step * d).collect();
                let trial_state = self.layout.to_state(&trial);
                if trial_state.vm().iter().all(|v| *v > 0.0) {
                    let h_trial = self.measure(&trial_state);
                    let j_trial = weighted_sse(z, &h_trial, &weights);
                    if j_trial <= objective * (1.0 + 1e-12) {
                        accepted = Some((trial, h_trial, j_trial));
                        break;
                    }
                }
                step *= 0.5;
            }
            match accepted {
                Some((trial, h_trial, j_trial)) => {
                    x = trial;
                    h = h_trial;
                    objective = j_trial;
                    history.push(objective);
                    if step * full_step < cfg.tol {
                        converged = true;
                        break;
                    }
                }
                None => {
                    converged = full_step < cfg.tol;
                    break;
                }
            }
        }

        self.layout.wrap_angles(&mut x);
        let state = self.layout.to_state(&x);
        let residual = z.iter().zip(&h).map(|(z, h)| z - h).collect();
        Ok(StateEstimate {
            state,
            iterations,
            converged,
            objective,
            objective_history: history,
            residual,
            weights,
        })
    }

    /// Cleans `window`, then runs [`wls`](Self::wls) on the cleaned current
    /// sample with the window's own weights.
    pub fn rwls(
        &self,
        window: &MeasurementWindow,
        clean: &CleanConfig,
        cfg: &WlsConfig,
        start: &OperatingState,
    ) -> Result<TwoStageEstimate, EstimatorError> {
        if window.n_vars() != self.plan.len() {
            return Err(EstimatorError::Length {
                what: "window",
                found: window.n_vars(),
                expected: self.plan.len(),
            });
        }
        let cleaning = clean_window(window, clean)?;
        let estimate = self.wls(&cleaning.measurements, window.sigma(), cfg, start)?;
        Ok(TwoStageEstimate { cleaning, estimate })
    }
}

/// Output of both stages.
#[derive(Debug, Clone)]
pub struct TwoStageEstimate {
    pub cleaning: WindowCleaning,
    pub estimate: StateEstimate,
}

/// Solves `G x = b` for symmetric positive definite `G` (lower triangle
/// filled). A Cholesky pivot below `pivot_tol * G_kk` means column `k` is
/// numerically a combination of the earlier ones and is reported as
/// unobservable.
fn solve_spd(gain: &Mat<f64>, rhs: &Mat<f64>, pivot_tol: f64) -> Result<Vec<f64>, EstimatorError> {
    use faer::prelude::*;
    let n = gain.nrows();
    if let Some(column) = (0..n).find(|&i| !(gain[(i, i)] > 0.0 && gain[(i, i)].is_finite())) {
        return Err(EstimatorError::Unobservable { column });
    }
    let llt = gain.llt(Side::Lower).map_err(|_| EstimatorError::Unobservable {
        column: first_weak_pivot(gain, pivot_tol),
    })?;
    let l = llt.L();
    if let Some(column) = (0..n).find(|&i| !(l[(i, i)] * l[(i, i)] > pivot_tol * gain[(i, i)])) {
        return Err(EstimatorError::Unobservable { column });
    }
    let sol = llt.solve(rhs);
    Ok((0..n).map(|i| sol[(i, 0)]).collect())
}

/// Column at which an unpivoted Cholesky sweep first loses positivity.
fn first_weak_pivot(gain: &Mat<f64>, pivot_tol: f64) -> usize {
    let n = gain.nrows();
    let mut l = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = gain[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > pivot_tol * gain[(j, j)]) {
            return j;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = gain[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    n.saturating_sub(1)
}

/// Convenience wrapper: prepares an [`Estimator`], draws the start point
/// from `cfg.init` and runs plain WLS.
pub fn wls_estimate<R: Rng + ?Sized>(
    case: &GridCase,
    plan: &MeasurementPlan,
    z: &[f64],
    sigma: &[f64],
    cfg: &WlsConfig,
    rng: &mut R,
) -> Result<StateEstimate, EstimatorError> {
    let est = Estimator::new(case, plan.clone())?;
    let start = est.initial_state(&cfg.init, rng)?;
    est.wls(z, sigma, cfg, &start)
}

/// Convenience wrapper for the two-stage estimate.
pub fn rwls_estimate<R: Rng + ?Sized>(
    case: &GridCase,
    plan: &MeasurementPlan,
    window: &MeasurementWindow,
    clean: &CleanConfig,
    cfg: &WlsConfig,
    rng: &mut R,
) -> Result<TwoStageEstimate, EstimatorError> {
    let est = Estimator::new(case, plan.clone())?;
    let start = est.initial_state(&cfg.init, rng)?;
    est.rwls(window, clean, cfg, &start)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormTriple {
    /// Norm of the weighted estimation error `W (h(x_hat) - h(x))`.
    pub estimated: f64,
    /// Norm of the weighted residual `W (z - h(x_hat))`.
    pub residual: f64,
    /// Norm of the weighted measurement error `W (z - h(x))`.
    pub measurement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    pub residual: Vec<f64>,
    pub measurement_error: Vec<f64>,
    pub estimated_error: Vec<f64>,
    pub l1: NormTriple,
    pub l2: NormTriple,
}

/// Splits the measurement error into the residual and the error of the
/// estimated measurements: `z - h(x) = (z - h(x_hat)) + (h(x_hat) - h(x))`.
pub fn error_decomposition(
    z: &[f64],
    h_true: &[f64],
    h_hat: &[f64],
    weights: &[f64],
) -> Result<ErrorDecomposition, EstimatorError> {
    let m = z.len();
    for (what, v) in [("true values", h_true), ("estimated values", h_hat), ("weights", weights)] {
        if v.len() != m {
            return Err(EstimatorError::Length {
                what,
                found: v.len(),
                expected: m,
            });
        }
    }
    let residual: Vec<f64> = z.iter().zip(h_hat).map(|(z, h)| z - h).collect();
    let measurement_error: Vec<f64> = z.iter().zip(h_true).map(|(z, h)| z - h).collect();
    let estimated_error: Vec<f64> = h_hat.iter().zip(h_true).map(|(a, b)| a - b).collect();
    let norms = |p: i32| {
        let norm = |v: &[f64]| -> f64 {
            let s: f64 = v.iter().zip(weights).map(|(x, w)| (w * x).abs().powi(p)).sum();
            s.powf(1.0 / p as f64)
        };
        NormTriple {
            estimated: norm(&estimated_error),
            residual: norm(&residual),
            measurement: norm(&measurement_error),
        }
    };
    Ok(ErrorDecomposition {
        l1: norms(1),
        l2: norms(2),
        residual,
        measurement_error,
        estimated_error,
    })
}

/// A state estimate together with what is needed to reproduce it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub case_hash: String,
    pub plan_hash: String,
    pub seed: Option<u64>,
    pub config: WlsConfig,
    pub estimate: StateEstimate,
}

impl EstimateRecord {
    pub fn new(est: &Estimator, seed: Option<u64>, config: &WlsConfig, estimate: StateEstimate) -> Self {
        Self {
            case_hash: est.case_hash().to_string(),
            plan_hash: est.plan().content_hash(),
            seed,
            config: config.clone(),
            estimate,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimate serializes")
    }
}

#[cfg(test)]
mod tests;
