use faer::prelude::*;
use faer::Mat;
use num_complex::Complex64;

use super::{OperatingState, PowerFlowError};
use crate::grid::{AdmittanceMatrix, BusType, GridCase};

const J: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Clone)]
pub struct PowerFlowOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    /// Starting point; the case's own voltages (with generator setpoints) when `None`.
    pub initial: Option<OperatingState>,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iter: 30,
            initial: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub state: OperatingState,
    pub iterations: usize,
    /// Largest absolute P/Q mismatch at the returned state, per-unit.
    pub max_mismatch: f64,
}

pub fn solve_power_flow(case: &GridCase, ybus: &AdmittanceMatrix) -> Result<PowerFlowSolution, PowerFlowError> {
    solve_power_flow_with(case, ybus, &PowerFlowOptions::default())
}

/// Newton-Raphson in polar coordinates. Unknowns are the angles of all
/// non-slack buses and the magnitudes of PQ buses. Generator reactive limits
/// are not enforced.
pub fn solve_power_flow_with(
    case: &GridCase,
    ybus: &AdmittanceMatrix,
    opts: &PowerFlowOptions,
) -> Result<PowerFlowSolution, PowerFlowError> {
    if !(opts.tolerance > 0.0) {
        return Err(PowerFlowError::BadTolerance(opts.tolerance));
    }
    let n = case.n_bus();
    let types = case.effective_bus_types();
    let (p_sched, q_sched) = case.scheduled_injections();
    let setpoints = case.voltage_setpoints();

    let (mut vm, mut va) = match &opts.initial {
        Some(s) => (s.vm().to_vec(), s.va().to_vec()),
        None => (setpoints.clone(), case.buses.iter().map(|b| b.va).collect()),
    };
    for k in 0..n {
        if types[k] != BusType::Pq {
            vm[k] = setpoints[k];
        }
    }
    let slack = case.slack_index();
    va[slack] = case.buses[slack].va;

    let pvpq: Vec<usize> = (0..n).filter(|&k| types[k] != BusType::Slack).collect();
    let pq: Vec<usize> = (0..n).filter(|&k| types[k] == BusType::Pq).collect();
    let mut angle_pos = vec![usize::MAX; n];
    for (i, &k) in pvpq.iter().enumerate() {
        angle_pos[k] = i;
    }
    let mut mag_pos = vec![usize::MAX; n];
    for (i, &k) in pq.iter().enumerate() {
        mag_pos[k] = pvpq.len() + i;
    }
    let dim = pvpq.len() + pq.len();

    let mismatch = |vm: &[f64], va: &[f64]| -> (Vec<Complex64>, Vec<Complex64>, Vec<f64>) {
        let v: Vec<Complex64> = vm.iter().zip(va).map(|(&m, &a)| Complex64::from_polar(m, a)).collect();
        let current = ybus.mul_vec(&v);
        let mut f = Vec::with_capacity(dim);
        for &k in &pvpq {
            f.push((v[k] * current[k].conj()).re - p_sched[k]);
        }
        for &k in &pq {
            f.push((v[k] * current[k].conj()).im - q_sched[k]);
        }
        (v, current, f)
    };
    let norm_inf = |f: &[f64]| f.iter().fold(0.0f64, |m, x| m.max(x.abs()));

    let mut iterations = 0;
    loop {
        let (v, current, f) = mismatch(&vm, &va);
        let worst = norm_inf(&f);
        if !worst.is_finite() {
            return Err(PowerFlowError::NotConverged {
                iterations,
                mismatch: worst,
            });
        }
        if worst < opts.tolerance {
            let state = OperatingState::new(vm, va).map_err(|_| PowerFlowError::NotConverged {
                iterations,
                mismatch: worst,
            })?;
            return Ok(PowerFlowSolution {
                state,
                iterations,
                max_mismatch: worst,
            });
        }
        if iterations == opts.max_iter {
            return Err(PowerFlowError::NotConverged {
                iterations,
                mismatch: worst,
            });
        }

        let mut jac = Mat::<f64>::zeros(dim, dim);
        for (row_p, &k) in pvpq.iter().enumerate() {
            let row_q = mag_pos[k];
            for (j, y) in ybus.row(k) {
                let mut d_angle = -J * v[k] * (y * v[j]).conj();
                let mut d_mag = v[k] * (y * v[j] / vm[j]).conj();
                if j == k {
                    d_angle += J * v[k] * current[k].conj();
                    d_mag += v[k] / vm[k] * current[k].conj();
                }
                if angle_pos[j] != usize::MAX {
                    jac[(row_p, angle_pos[j])] = d_angle.re;
                    if row_q != usize::MAX {
                        jac[(row_q, angle_pos[j])] = d_angle.im;
                    }
                }
                if mag_pos[j] != usize::MAX {
                    jac[(row_p, mag_pos[j])] = d_mag.re;
                    if row_q != usize::MAX {
                        jac[(row_q, mag_pos[j])] = d_mag.im;
                    }
                }
            }
        }

        let lu = jac.partial_piv_lu();
        let u = lu.U();
        let pivot_max = (0..dim).fold(0.0f64, |m, i| m.max(u[(i, i)].abs()));
        if (0..dim).any(|i| !(u[(i, i)].abs() > 1e-14 * pivot_max.max(1.0))) {
            return Err(PowerFlowError::SingularJacobian { iteration: iterations });
        }
        let rhs = Mat::<f64>::from_fn(dim, 1, |i, _| f[i]);
        let dx = lu.solve(&rhs);
        for &k in &pvpq {
            va[k] -= dx[(angle_pos[k], 0)];
        }
        for &k in &pq {
            vm[k] -= dx[(mag_pos[k], 0)];
        }
        iterations += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_admittance, fixtures};

    #[test]
    fn unloaded_two_bus_converges_immediately() {
        let case = fixtures::two_bus(0.0, 0.1, 0.0, 0.0);
        let y = build_admittance(&case).unwrap();
        let sol = solve_power_flow(&case, &y).unwrap();
        assert!(sol.iterations <= 1);
        assert_eq!(sol.state.vm(), &[1.0, 1.0]);
        assert!(sol.state.va()[1].abs() < 1e-12);
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let f_lo = f(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(mid) > 0.0) == (f_lo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// On a lossless line with unit sending voltage and no reactive load,
    /// `Q = 0` forces `vm = cos(theta)` and the active balance reduces to a
    /// scalar equation in the angle.
    #[test]
    fn two_bus_matches_scalar_oracle() {
        let (x, load) = (0.1, 0.1);
        let case = fixtures::two_bus(0.0, x, load, 0.0);
        let y = build_admittance(&case).unwrap();
        let sol = solve_power_flow(&case, &y).unwrap();
        let theta = bisect(|t| t.cos() * t.sin() / x + load, -std::f64::consts::FRAC_PI_4, 0.0);
        assert!((sol.state.va()[1] - theta).abs() < 1e-8, "{} vs {theta}", sol.state.va()[1]);
        assert!((sol.state.vm()[1] - theta.cos()).abs() < 1e-8);
    }

    /// Mismatch recomputed with an element-by-element sum over the dense
    /// admittance matrix.
    #[test]
    fn shipped_cases_converge() {
        for name in ["case30.m", "case57.m", "case118.m", "case300.m"] {
            let case = fixtures::load(name);
            let y = build_admittance(&case).unwrap();
            let sol = solve_power_flow(&case, &y).unwrap();
            assert!(sol.iterations <= 10, "{name}: {} iterations", sol.iterations);
            let dense = y.to_dense();
            let (p, q) = case.scheduled_injections();
            let types = case.effective_bus_types();
            let vm = sol.state.vm();
            let va = sol.state.va();
            for k in 0..case.n_bus() {
                let (mut pk, mut qk) = (0.0, 0.0);
                for j in 0..case.n_bus() {
                    let (g, b) = (dense[k][j].re, dense[k][j].im);
                    let d = va[k] - va[j];
                    pk += vm[k] * vm[j] * (g * d.cos() + b * d.sin());
                    qk += vm[k] * vm[j] * (g * d.sin() - b * d.cos());
                }
                if types[k] != BusType::Slack {
                    assert!((pk - p[k]).abs() < 1e-8, "{name} bus {k} P");
                }
                if types[k] == BusType::Pq {
                    assert!((qk - q[k]).abs() < 1e-8, "{name} bus {k} Q");
                }
            }
        }
    }

    #[test]
    fn warm_start_from_solution_needs_no_iterations() {
        let case = fixtures::load("case30.m");
        let y = build_admittance(&case).unwrap();
        let first = solve_power_flow(&case, &y).unwrap();
        let opts = PowerFlowOptions {
            initial: Some(first.state.clone()),
            ..Default::default()
        };
        let again = solve_power_flow_with(&case, &y, &opts).unwrap();
        assert_eq!(again.iterations, 0);
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let case = fixtures::two_bus(0.0, 0.1, 20.0, 0.0);
        let y = build_admittance(&case).unwrap();
        assert!(solve_power_flow(&case, &y).is_err());
    }
}
