//! Network data: buses, branches and generators in per-unit, plus the nodal
//! admittance matrix built from them.
//!
//! Cases are read from the MATPOWER tabular format (see `docs/case-format.md`).
//! Everything is converted to per-unit on `base_mva` at parse time and angles
//! are stored in radians.

mod admittance;
mod parse;

pub use admittance::{build_admittance, AdmittanceMatrix, BranchAdmittance};
pub use parse::parse_case;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaseError {
    #[error("line {line}: malformed section header: {text}")]
    MalformedHeader { line: usize, text: String },
    #[error("line {line}: non-numeric field {token:?}")]
    NonNumeric { line: usize, token: String },
    #[error("line {line}: {table} row has {found} columns, need at least {needed}")]
    ShortRow {
        line: usize,
        table: &'static str,
        found: usize,
        needed: usize,
    },
    #[error("line {line}: unterminated matrix section")]
    Unterminated { line: usize },
    #[error("line {line}: case has zero buses")]
    NoBuses { line: usize },
    #[error("line {line}: case has no slack bus")]
    NoSlack { line: usize },
    #[error("line {line}: bus {bus} is a second slack bus")]
    MultipleSlack { line: usize, bus: usize },
    #[error("line {line}: unsupported bus type {code}")]
    BadBusType { line: usize, code: f64 },
    #[error("line {line}: duplicate bus id {bus}")]
    DuplicateBus { line: usize, bus: usize },
    #[error("line {line}: reference to unknown bus {bus}")]
    UnknownBus { line: usize, bus: usize },
    #[error("line {line}: invalid branch: {reason}")]
    InvalidBranch { line: usize, reason: String },
    #[error("line {line}: missing or invalid baseMVA")]
    BadBase { line: usize },
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BusType {
    Pq,
    Pv,
    Slack,
}

impl BusType {
    pub fn matpower_code(self) -> u8 {
        match self {
            BusType::Pq => 1,
            BusType::Pv => 2,
            BusType::Slack => 3,
        }
    }
}

/// A bus with its load and shunt in per-unit. `vm`/`va` are the values given
/// in the case file (voltage setpoint / starting point and reference angle).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusType,
    pub load_p: f64,
    pub load_q: f64,
    pub shunt_g: f64,
    pub shunt_b: f64,
    pub vm: f64,
    pub va: f64,
    pub base_kv: f64,
}

/// A pi-model branch. `tap` is the off-nominal ratio at the from end (already
/// mapped from 0 to 1), `shift` is in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    pub charging_b: f64,
    pub tap: f64,
    pub shift: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub p_setpoint: f64,
    pub q_output: f64,
    pub q_max: f64,
    pub q_min: f64,
    pub vm_setpoint: f64,
    pub in_service: bool,
}

/// A parsed network. Bus and branch order is the file order.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub gens: Vec<Generator>,
    index: HashMap<usize, usize>,
}

impl GridCase {
    /// Assembles a case from parts and checks the structural invariants.
    pub fn new(
        base_mva: f64,
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        gens: Vec<Generator>,
    ) -> Result<Self, CaseError> {
        if !(base_mva.is_finite() && base_mva > 0.0) {
            return Err(CaseError::BadBase { line: 0 });
        }
        if buses.is_empty() {
            return Err(CaseError::NoBuses { line: 0 });
        }
        let mut index = HashMap::with_capacity(buses.len());
        let mut slack = None;
        for (k, bus) in buses.iter().enumerate() {
            if index.insert(bus.id, k).is_some() {
                return Err(CaseError::DuplicateBus { line: 0, bus: bus.id });
            }
            if bus.kind == BusType::Slack {
                if slack.is_some() {
                    return Err(CaseError::MultipleSlack { line: 0, bus: bus.id });
                }
                slack = Some(k);
            }
        }
        if slack.is_none() {
            return Err(CaseError::NoSlack { line: 0 });
        }
        for br in &branches {
            for end in [br.from_bus, br.to_bus] {
                if !index.contains_key(&end) {
                    return Err(CaseError::UnknownBus { line: 0, bus: end });
                }
            }
            if let Some(reason) = branch_defect(br) {
                return Err(CaseError::InvalidBranch { line: 0, reason });
            }
        }
        for g in &gens {
            if !index.contains_key(&g.bus) {
                return Err(CaseError::UnknownBus { line: 0, bus: g.bus });
            }
        }
        Ok(Self {
            base_mva,
            buses,
            branches,
            gens,
            index,
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, CaseError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| CaseError::Io(format!("{}: {e}", path.as_ref().display())))?;
        parse_case(&text)
    }

    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branch(&self) -> usize {
        self.branches.len()
    }

    /// Position of a bus id in `buses`.
    pub fn bus_index(&self, id: usize) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusType::Slack)
            .expect("validated case has a slack bus")
    }

    /// Bus positions of each branch's (from, to) ends.
    pub fn branch_ends(&self) -> Vec<(usize, usize)> {
        self.branches
            .iter()
            .map(|br| (self.index[&br.from_bus], self.index[&br.to_bus]))
            .collect()
    }

    /// Scheduled net injections (generation minus load) per bus, per-unit.
    pub fn scheduled_injections(&self) -> (Vec<f64>, Vec<f64>) {
        let mut p: Vec<f64> = self.buses.iter().map(|b| -b.load_p).collect();
        let q: Vec<f64> = self.buses.iter().map(|b| -b.load_q).collect();
        for g in self.gens.iter().filter(|g| g.in_service) {
            p[self.index[&g.bus]] += g.p_setpoint;
        }
        (p, q)
    }

    /// Effective bus types for power flow: a PV bus with no in-service
    /// generator is treated as PQ.
    pub fn effective_bus_types(&self) -> Vec<BusType> {
        let mut has_gen = vec![false; self.n_bus()];
        for g in self.gens.iter().filter(|g| g.in_service) {
            has_gen[self.index[&g.bus]] = true;
        }
        self.buses
            .iter()
            .zip(&has_gen)
            .map(|(b, &g)| match b.kind {
                BusType::Pv if !g => BusType::Pq,
                k => k,
            })
            .collect()
    }

    /// Voltage magnitude setpoints: generator setpoint where a generator is in
    /// service, the bus value otherwise.
    pub fn voltage_setpoints(&self) -> Vec<f64> {
        let mut vm: Vec<f64> = self.buses.iter().map(|b| b.vm).collect();
        let mut set = vec![false; self.n_bus()];
        for g in self.gens.iter().filter(|g| g.in_service) {
            let k = self.index[&g.bus];
            if !set[k] && self.buses[k].kind != BusType::Pq {
                vm[k] = g.vm_setpoint;
                set[k] = true;
            }
        }
        vm
    }

    /// Short content hash, used to tag reports and window sidecars.
    pub fn content_hash(&self) -> String {
        crate::util::short_hash(self.to_matpower().as_bytes())
    }

    /// Writes the case back out in the MATPOWER subset understood by
    /// [`parse_case`]. Values are emitted so that re-parsing reproduces the
    /// stored per-unit numbers bit for bit.
    pub fn to_matpower(&self) -> String {
        let base = self.base_mva;
        let mut out = String::new();
        out.push_str("function mpc = case_export\n");
        out.push_str("mpc.version = '2';\n");
        let _ = writeln!(out, "mpc.baseMVA = {};", base);
        out.push_str("\n%% bus data\n%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin\n");
        out.push_str("mpc.bus = [\n");
        for b in &self.buses {
            let _ = writeln!(
                out,
                "\t{}\t{}\t{}\t{}\t{}\t{}\t1\t{}\t{}\t{}\t1\t1.1\t0.9;",
                b.id,
                b.kind.matpower_code(),
                unscale(b.load_p, base),
                unscale(b.load_q, base),
                unscale(b.shunt_g, base),
                unscale(b.shunt_b, base),
                b.vm,
                rad_to_deg_exact(b.va),
                b.base_kv,
            );
        }
        out.push_str("];\n\n%% generator data\n%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\tPmin\n");
        out.push_str("mpc.gen = [\n");
        for g in &self.gens {
            let _ = writeln!(
                out,
                "\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t0\t0;",
                g.bus,
                unscale(g.p_setpoint, base),
                unscale(g.q_output, base),
                unscale(g.q_max, base),
                unscale(g.q_min, base),
                g.vm_setpoint,
                base,
                u8::from(g.in_service),
            );
        }
        out.push_str("];\n\n%% branch data\n%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\n");
        out.push_str("mpc.branch = [\n");
        for br in &self.branches {
            let _ = writeln!(
                out,
                "\t{}\t{}\t{}\t{}\t{}\t0\t0\t0\t{}\t{}\t{};",
                br.from_bus,
                br.to_bus,
                br.r,
                br.x,
                br.charging_b,
                br.tap,
                rad_to_deg_exact(br.shift),
                u8::from(br.in_service),
            );
        }
        out.push_str("];\n");
        out
    }
}

pub(crate) fn branch_defect(br: &Branch) -> Option<String> {
    if !(br.r.is_finite() && br.x.is_finite() && br.charging_b.is_finite()) {
        return Some("non-finite impedance".into());
    }
    if br.r < 0.0 {
        return Some(format!("negative resistance {}", br.r));
    }
    if br.in_service && br.r == 0.0 && br.x == 0.0 {
        return Some("zero series impedance".into());
    }
    if !(br.tap.is_finite() && br.tap > 0.0) {
        return Some(format!("tap ratio {} is not positive", br.tap));
    }
    None
}

pub(crate) fn deg_to_rad(deg: f64) -> f64 {
    deg * std::f64::consts::PI / 180.0
}

/// Finds a float that maps back to `target` under `forward`, searching a few
/// ulps around the naive inverse.
fn exact_preimage(target: f64, naive: f64, forward: impl Fn(f64) -> f64) -> f64 {
    if !naive.is_finite() || forward(naive) == target {
        return naive;
    }
    let mut lo = naive;
    let mut hi = naive;
    for _ in 0..16 {
        lo = lo.next_down();
        hi = hi.next_up();
        if forward(lo) == target {
            return lo;
        }
        if forward(hi) == target {
            return hi;
        }
    }
    naive
}

fn unscale(pu: f64, base: f64) -> f64 {
    exact_preimage(pu, pu * base, |mw| mw / base)
}

fn rad_to_deg_exact(rad: f64) -> f64 {
    exact_preimage(rad, rad * 180.0 / std::f64::consts::PI, deg_to_rad)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_second_slack() {
        let mut case = fixtures::two_bus(0.0, 0.1, 0.0, 0.0);
        case.buses[1].kind = BusType::Slack;
        let err = GridCase::new(100.0, case.buses, case.branches, case.gens).unwrap_err();
        assert!(matches!(err, CaseError::MultipleSlack { bus: 2, .. }));
    }

    #[test]
    fn rejects_dangling_branch() {
        let mut case = fixtures::two_bus(0.0, 0.1, 0.0, 0.0);
        case.branches[0].to_bus = 7;
        let err = GridCase::new(100.0, case.buses, case.branches, case.gens).unwrap_err();
        assert_eq!(err, CaseError::UnknownBus { line: 0, bus: 7 });
    }

    #[test]
    fn pv_without_generator_acts_as_pq() {
        let mut case = fixtures::two_bus(0.0, 0.1, 0.0, 0.0);
        case.buses[1].kind = BusType::Pv;
        assert_eq!(case.effective_bus_types()[1], BusType::Pq);
    }

    #[test]
    fn unscale_inverts_parse_scaling() {
        for mw in [21.7, 0.19, 1e-3, 123.456789, -7.3] {
            let pu = mw / 100.0;
            assert_eq!(unscale(pu, 100.0) / 100.0, pu);
        }
        for deg in [-14.22, 0.5, 30.0, 179.9] {
            let rad = deg_to_rad(deg);
            assert_eq!(deg_to_rad(rad_to_deg_exact(rad)), rad);
        }
    }
}
