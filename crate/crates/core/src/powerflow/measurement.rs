use num_complex::Complex64;

use super::{MeasurementKind, MeasurementPlan, OperatingState, StateLayout};
use crate::grid::{AdmittanceMatrix, BranchAdmittance};

const J: Complex64 = Complex64::new(0.0, 1.0);

/// Sparse measurement Jacobian stored row by row; each row lists
/// `(state column, value)` with strictly increasing columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    n_cols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl Jacobian {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                let mut d = vec![0.0; self.n_cols];
                for &(c, v) in r {
                    d[c] = v;
                }
                d
            })
            .collect()
    }
}

fn branch_flow(b: &BranchAdmittance, v: &[Complex64], from_end: bool) -> Complex64 {
    if from_end {
        v[b.from] * (b.yff * v[b.from] + b.yft * v[b.to]).conj()
    } else {
        v[b.to] * (b.ytf * v[b.from] + b.ytt * v[b.to]).conj()
    }
}

/// Evaluates every entry of `plan` at `state`.
pub fn measurement_function(
    ybus: &AdmittanceMatrix,
    plan: &MeasurementPlan,
    state: &OperatingState,
) -> Vec<f64> {
    let v = state.phasors();
    let needs_injection = plan
        .entries()
        .iter()
        .any(|m| matches!(m.kind, MeasurementKind::Pinj | MeasurementKind::Qinj));
    let injections: Vec<Complex64> = if needs_injection {
        ybus.mul_vec(&v)
            .iter()
            .zip(&v)
            .map(|(i, vk)| vk * i.conj())
            .collect()
    } else {
        Vec::new()
    };
    let branches = ybus.branches();
    plan.entries()
        .iter()
        .map(|m| match m.kind {
            MeasurementKind::Pf => branch_flow(&branches[m.index], &v, true).re,
            MeasurementKind::Qf => branch_flow(&branches[m.index], &v, true).im,
            MeasurementKind::Pt => -branch_flow(&branches[m.index], &v, false).re,
            MeasurementKind::Qt => -branch_flow(&branches[m.index], &v, false).im,
            MeasurementKind::Pinj => injections[m.index].re,
            MeasurementKind::Qinj => injections[m.index].im,
            MeasurementKind::Vm => state.vm()[m.index],
        })
        .collect()
}

/// Derivatives of `S = V_a conj(y_aa V_a + y_ab V_b)` with respect to
/// `(theta_a, theta_b, vm_a, vm_b)`.
fn end_derivatives(
    va: Complex64,
    vb: Complex64,
    vm_a: f64,
    vm_b: f64,
    y_aa: Complex64,
    y_ab: Complex64,
) -> [Complex64; 4] {
    let current = y_aa * va + y_ab * vb;
    [
        J * va * current.conj() - J * vm_a * vm_a * y_aa.conj(),
        -J * va * (y_ab * vb).conj(),
        va / vm_a * current.conj() + vm_a * y_aa.conj(),
        va * (y_ab * vb / vm_b).conj(),
    ]
}

fn push_row(entries: &mut Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    entries.sort_by_key(|&(c, _)| c);
    let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
    for &(c, v) in entries.iter() {
        match merged.last_mut() {
            Some(last) if last.0 == c => last.1 += v,
            _ => merged.push((c, v)),
        }
    }
    entries.clear();
    merged
}

/// Analytic Jacobian of [`measurement_function`] with respect to the state
/// vector described by `layout`.
pub fn measurement_jacobian(
    ybus: &AdmittanceMatrix,
    plan: &MeasurementPlan,
    state: &OperatingState,
    layout: &StateLayout,
) -> Jacobian {
    let v = state.phasors();
    let vm = state.vm();
    let current = ybus.mul_vec(&v);
    let branches = ybus.branches();
    let mut scratch: Vec<(usize, f64)> = Vec::new();
    let mut rows = Vec::with_capacity(plan.len());

    for m in plan.entries() {
        match m.kind {
            MeasurementKind::Vm => {
                scratch.push((layout.magnitude_col(m.index), 1.0));
            }
            MeasurementKind::Pf | MeasurementKind::Qf | MeasurementKind::Pt | MeasurementKind::Qt => {
                let b = &branches[m.index];
                let from_end = matches!(m.kind, MeasurementKind::Pf | MeasurementKind::Qf);
                let (a, o, y_aa, y_ab, sign) = if from_end {
                    (b.from, b.to, b.yff, b.yft, 1.0)
                } else {
                    (b.to, b.from, b.ytt, b.ytf, -1.0)
                };
                let d = end_derivatives(v[a], v[o], vm[a], vm[o], y_aa, y_ab);
                let part = |z: Complex64| {
                    sign * if matches!(m.kind, MeasurementKind::Pf | MeasurementKind::Pt) {
                        z.re
                    } else {
                        z.im
                    }
                };
                if let Some(c) = layout.angle_col(a) {
                    scratch.push((c, part(d[0])));
                }
                if let Some(c) = layout.angle_col(o) {
                    scratch.push((c, part(d[1])));
                }
                scratch.push((layout.magnitude_col(a), part(d[2])));
                scratch.push((layout.magnitude_col(o), part(d[3])));
            }
            MeasurementKind::Pinj | MeasurementKind::Qinj => {
                let k = m.index;
                let real = m.kind == MeasurementKind::Pinj;
                let part = |z: Complex64| if real { z.re } else { z.im };
                let vk = v[k];
                for (j, y) in ybus.row(k) {
                    let mut d_angle = -J * vk * (y * v[j]).conj();
                    let mut d_mag = vk * (y * v[j] / vm[j]).conj();
                    if j == k {
                        d_angle += J * vk * current[k].conj();
                        d_mag += vk / vm[k] * current[k].conj();
                    }
                    if let Some(c) = layout.angle_col(j) {
                        scratch.push((c, part(d_angle)));
                    }
                    scratch.push((layout.magnitude_col(j), part(d_mag)));
                }
            }
        }
        rows.push(push_row(&mut scratch));
    }
    Jacobian {
        n_cols: layout.n_state(),
        rows,
    }
}
