//! AC power flow, the SCADA measurement function `h(x)` and its Jacobian.
//!
//! States are polar: a magnitude and an angle per bus. Branch flow
//! measurements use the "power leaving the from bus" / "power arriving at the
//! to bus" convention, so on a lossless branch `Pf == Pt`, and bus injections
//! satisfy `Pinj_k = sum(Pf, from = k) - sum(Pt, to = k) + g_sh,k * vm_k^2`.

mod measurement;
mod newton;

pub use measurement::{measurement_function, measurement_jacobian, Jacobian};
pub use newton::{solve_power_flow, solve_power_flow_with, PowerFlowOptions, PowerFlowSolution};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{CaseError, GridCase};

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("power flow did not converge in {iterations} iterations (mismatch {mismatch:.3e})")]
    NotConverged { iterations: usize, mismatch: f64 },
    #[error("power flow jacobian is singular at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("invalid tolerance {0}")]
    BadTolerance(f64),
    #[error(transparent)]
    Case(#[from] CaseError),
}

#[derive(Debug, Error, PartialEq)]
pub enum StateError {
    #[error("magnitude and angle vectors differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("voltage magnitude at bus position {0} is not positive: {1}")]
    NonPositive(usize, f64),
}

/// Bus voltages in polar form: `vm` in p.u., `va` in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingState {
    vm: Vec<f64>,
    va: Vec<f64>,
}

impl OperatingState {
    pub fn new(vm: Vec<f64>, va: Vec<f64>) -> Result<Self, StateError> {
        if vm.len() != va.len() {
            return Err(StateError::Length(vm.len(), va.len()));
        }
        if let Some((k, &v)) = vm.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(StateError::NonPositive(k, v));
        }
        Ok(Self { vm, va })
    }

    /// `vm = 1`, `va = 0` everywhere.
    pub fn flat(n_bus: usize) -> Self {
        Self {
            vm: vec![1.0; n_bus],
            va: vec![0.0; n_bus],
        }
    }

    pub fn vm(&self) -> &[f64] {
        &self.vm
    }

    pub fn va(&self) -> &[f64] {
        &self.va
    }

    pub fn n_bus(&self) -> usize {
        self.vm.len()
    }

    pub(crate) fn phasors(&self) -> Vec<num_complex::Complex64> {
        self.vm
            .iter()
            .zip(&self.va)
            .map(|(&m, &a)| num_complex::Complex64::from_polar(m, a))
            .collect()
    }

    /// Magnitudes followed by angles, the ordering used when comparing
    /// estimated and true states.
    pub fn stacked(&self) -> Vec<f64> {
        self.vm.iter().chain(&self.va).copied().collect()
    }
}

/// Column layout of the estimation state vector: angles of every non-slack
/// bus (in bus order) followed by magnitudes of every bus. The slack angle is
/// pinned at `reference_angle`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateLayout {
    pub n_bus: usize,
    pub slack: usize,
    pub reference_angle: f64,
}

impl StateLayout {
    pub fn for_case(case: &GridCase) -> Self {
        let slack = case.slack_index();
        Self {
            n_bus: case.n_bus(),
            slack,
            reference_angle: case.buses[slack].va,
        }
    }

    pub fn n_state(&self) -> usize {
        2 * self.n_bus - 1
    }

    pub fn angle_col(&self, bus: usize) -> Option<usize> {
        use std::cmp::Ordering::*;
        match bus.cmp(&self.slack) {
            Less => Some(bus),
            Equal => None,
            Greater => Some(bus - 1),
        }
    }

    pub fn magnitude_col(&self, bus: usize) -> usize {
        self.n_bus - 1 + bus
    }

    pub fn to_vector(&self, state: &OperatingState) -> Vec<f64> {
        let mut x = vec![0.0; self.n_state()];
        for bus in 0..self.n_bus {
            if let Some(c) = self.angle_col(bus) {
                x[c] = state.va[bus];
            }
            x[self.magnitude_col(bus)] = state.vm[bus];
        }
        x
    }

    /// Inverse of [`to_vector`](Self::to_vector); magnitudes are not checked
    /// here so that intermediate Gauss-Newton iterates can be represented.
    pub fn to_state(&self, x: &[f64]) -> OperatingState {
        let mut vm = vec![0.0; self.n_bus];
        let mut va = vec![0.0; self.n_bus];
        for bus in 0..self.n_bus {
            va[bus] = match self.angle_col(bus) {
                Some(c) => x[c],
                None => self.reference_angle,
            };
            vm[bus] = x[self.magnitude_col(bus)];
        }
        OperatingState { vm, va }
    }

    /// Shifts every angle column by a multiple of `2 pi` into
    /// `(reference - pi, reference + pi]`.
    pub fn wrap_angles(&self, x: &mut [f64]) {
        let tau = 2.0 * std::f64::consts::PI;
        for bus in 0..self.n_bus {
            if let Some(c) = self.angle_col(bus) {
                let turns = ((x[c] - self.reference_angle) / tau).round();
                let mut a = x[c] - turns * tau;
                if a <= self.reference_angle - std::f64::consts::PI {
                    a += tau;
                }
                x[c] = a;
            }
        }
    }
}

/// Measured quantity. Display labels follow the grouping Pt, Pf, Pb, Qt, Qf,
/// Qb, Vm where "b" marks a bus injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MeasurementKind {
    Pt,
    Pf,
    Pinj,
    Qt,
    Qf,
    Qinj,
    Vm,
}

impl MeasurementKind {
    pub const ALL: [MeasurementKind; 7] = [
        MeasurementKind::Pt,
        MeasurementKind::Pf,
        MeasurementKind::Pinj,
        MeasurementKind::Qt,
        MeasurementKind::Qf,
        MeasurementKind::Qinj,
        MeasurementKind::Vm,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MeasurementKind::Pt => "Pt",
            MeasurementKind::Pf => "Pf",
            MeasurementKind::Pinj => "Pb",
            MeasurementKind::Qt => "Qt",
            MeasurementKind::Qf => "Qf",
            MeasurementKind::Qinj => "Qb",
            MeasurementKind::Vm => "Vm",
        }
    }

    pub fn is_branch(self) -> bool {
        matches!(
            self,
            MeasurementKind::Pt | MeasurementKind::Pf | MeasurementKind::Qt | MeasurementKind::Qf
        )
    }

    pub fn is_voltage(self) -> bool {
        self == MeasurementKind::Vm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Measurement {
    pub kind: MeasurementKind,
    /// Branch position for flow kinds, bus position otherwise.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementPlan {
    entries: Vec<Measurement>,
}

#[derive(Debug, Error, PartialEq)]
#[error("measurement {position} ({kind:?} #{index}) is out of range")]
pub struct PlanError {
    pub position: usize,
    pub kind: MeasurementKind,
    pub index: usize,
}

impl MeasurementPlan {
    /// Every branch flow at both ends, every bus injection and every bus
    /// voltage magnitude: `4 * n_branch + 3 * n_bus` entries, grouped by kind.
    pub fn full_scada(case: &GridCase) -> Self {
        let mut entries = Vec::with_capacity(4 * case.n_branch() + 3 * case.n_bus());
        for kind in MeasurementKind::ALL {
            let count = if kind.is_branch() { case.n_branch() } else { case.n_bus() };
            entries.extend((0..count).map(|index| Measurement { kind, index }));
        }
        Self { entries }
    }

    pub fn from_entries(entries: Vec<Measurement>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[Measurement] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, n_bus: usize, n_branch: usize) -> Result<(), PlanError> {
        for (position, m) in self.entries.iter().enumerate() {
            let limit = if m.kind.is_branch() { n_branch } else { n_bus };
            if m.index >= limit {
                return Err(PlanError {
                    position,
                    kind: m.kind,
                    index: m.index,
                });
            }
        }
        Ok(())
    }

    /// Row positions grouped by kind, in [`MeasurementKind::ALL`] order;
    /// kinds absent from the plan are omitted.
    pub fn groups(&self) -> Vec<(MeasurementKind, Vec<usize>)> {
        MeasurementKind::ALL
            .iter()
            .filter_map(|&kind| {
                let rows: Vec<usize> = self
                    .entries
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| m.kind == kind)
                    .map(|(i, _)| i)
                    .collect();
                (!rows.is_empty()).then_some((kind, rows))
            })
            .collect()
    }

    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.entries.len() * 9);
        for m in &self.entries {
            bytes.push(m.kind as u8);
            bytes.extend_from_slice(&(m.index as u64).to_le_bytes());
        }
        crate::util::short_hash(&bytes)
    }
}
