use num_complex::Complex64;

use super::{CaseError, GridCase};

/// Two-port admittances of one branch: `[If; It] = [[yff, yft], [ytf, ytt]] [Vf; Vt]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchAdmittance {
    pub from: usize,
    pub to: usize,
    pub yff: Complex64,
    pub yft: Complex64,
    pub ytf: Complex64,
    pub ytt: Complex64,
}

/// Sparse nodal admittance matrix, row-major with sorted column indices,
/// together with the branch quadruples and bus shunts it was assembled from.
#[derive(Debug, Clone)]
pub struct AdmittanceMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<Complex64>,
    branches: Vec<BranchAdmittance>,
    shunts: Vec<Complex64>,
}

impl AdmittanceMatrix {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn branches(&self) -> &[BranchAdmittance] {
        &self.branches
    }

    pub fn shunts(&self) -> &[Complex64] {
        &self.shunts
    }

    /// Nonzero entries `(column, value)` of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[span.clone()].binary_search(&j) {
            Ok(p) => self.vals[span.start + p],
            Err(_) => Complex64::new(0.0, 0.0),
        }
    }

    /// Bus current injections `I = Y V`.
    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(j, y)| y * v[j]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<Complex64>> {
        let mut dense = vec![vec![Complex64::new(0.0, 0.0); self.n]; self.n];
        for (i, row) in dense.iter_mut().enumerate() {
            for (j, y) in self.row(i) {
                row[j] = y;
            }
        }
        dense
    }
}

/// Builds the nodal admittance matrix with the standard pi model: series
/// admittance `1/(r + jx)`, half the line charging at each end, and the
/// off-nominal tap `tap * e^{j shift}` on the from side.
pub fn build_admittance(case: &GridCase) -> Result<AdmittanceMatrix, CaseError> {
    let n = case.n_bus();
    let ends = case.branch_ends();
    let mut branches = Vec::with_capacity(case.n_branch());
    for (br, &(f, t)) in case.branches.iter().zip(&ends) {
        if !br.in_service {
            continue;
        }
        if br.r == 0.0 && br.x == 0.0 {
            return Err(CaseError::InvalidBranch {
                line: 0,
                reason: format!("branch {}-{} has zero series impedance", br.from_bus, br.to_bus),
            });
        }
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let bc = Complex64::new(0.0, br.charging_b / 2.0);
        let tap = Complex64::from_polar(br.tap, br.shift);
        let ytt = ys + bc;
        branches.push(BranchAdmittance {
            from: f,
            to: t,
            yff: ytt / (tap * tap.conj()),
            yft: -ys / tap.conj(),
            ytf: -ys / tap,
            ytt,
        });
    }
    let shunts: Vec<Complex64> = case
        .buses
        .iter()
        .map(|b| Complex64::new(b.shunt_g, b.shunt_b))
        .collect();

    let mut rows: Vec<Vec<(usize, Complex64)>> = (0..n)
        .map(|i| vec![(i, shunts[i])])
        .collect();
    for b in &branches {
        rows[b.from].push((b.from, b.yff));
        rows[b.from].push((b.to, b.yft));
        rows[b.to].push((b.from, b.ytf));
        rows[b.to].push((b.to, b.ytt));
    }

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);
    for mut entries in rows {
        entries.sort_by_key(|&(j, _)| j);
        let mut k = 0;
        while k < entries.len() {
            let j = entries[k].0;
            let mut acc: Vec<Complex64> = Vec::new();
            while k < entries.len() && entries[k].0 == j {
                acc.push(entries[k].1);
                k += 1;
            }
            cols.push(j);
            vals.push(ordered_sum(&mut acc));
        }
        row_ptr.push(cols.len());
    }

    Ok(AdmittanceMatrix {
        n,
        row_ptr,
        cols,
        vals,
        branches,
        shunts,
    })
}

/// Order-independent sum: terms are sorted by value before accumulation so
/// the result does not depend on branch order.
fn ordered_sum(terms: &mut [Complex64]) -> Complex64 {
    terms.sort_by(|a, b| {
        a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im))
    });
    terms.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{fixtures, BusType};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn single_lossless_branch() {
        let case = fixtures::two_bus(0.0, 0.1, 0.0, 0.0);
        let y = build_admittance(&case).unwrap();
        let b = y.branches()[0];
        assert!((b.yff - c(0.0, -10.0)).norm() < 1e-12);
        assert!((b.ytt - c(0.0, -10.0)).norm() < 1e-12);
        assert!((b.yft - c(0.0, 10.0)).norm() < 1e-12);
        assert!((b.ytf - c(0.0, 10.0)).norm() < 1e-12);
        assert!((y.get(0, 1) - c(0.0, 10.0)).norm() < 1e-12);
    }

    #[test]
    fn shunt_only_case_is_diagonal() {
        let mut case = fixtures::two_bus(0.0, 0.1, 0.0, 0.0);
        case.buses[0].shunt_b = 0.19;
        case.buses[1].shunt_g = 0.05;
        let case = crate::grid::GridCase::new(100.0, case.buses, vec![], case.gens).unwrap();
        let y = build_admittance(&case).unwrap();
        assert_eq!(y.get(0, 0), c(0.0, 0.19));
        assert_eq!(y.get(1, 1), c(0.05, 0.0));
        assert_eq!(y.get(0, 1), c(0.0, 0.0));
    }

    #[test]
    fn zero_impedance_is_an_error() {
        let mut case = fixtures::two_bus(0.0, 0.1, 0.0, 0.0);
        // Bypass parse-time validation to exercise the assembly check.
        case.branches[0].x = 0.0;
        assert!(matches!(
            build_admittance(&case),
            Err(CaseError::InvalidBranch { .. })
        ));
    }

    /// Independent assembly: dense accumulation straight from branch data,
    /// without the quadruple structs.
    fn reassemble(case: &GridCase) -> Vec<Vec<Complex64>> {
        let n = case.n_bus();
        let mut y = vec![vec![c(0.0, 0.0); n]; n];
        for (k, b) in case.buses.iter().enumerate() {
            y[k][k] += c(b.shunt_g, b.shunt_b);
        }
        for br in &case.branches {
            let f = case.bus_index(br.from_bus).unwrap();
            let t = case.bus_index(br.to_bus).unwrap();
            let z2 = br.r * br.r + br.x * br.x;
            let (g, b) = (br.r / z2, -br.x / z2);
            let a = br.tap;
            let (cs, sn) = (br.shift.cos(), br.shift.sin());
            y[f][f] += c(g / (a * a), (b + br.charging_b / 2.0) / (a * a));
            y[t][t] += c(g, b + br.charging_b / 2.0);
            // -ys / (a e^{-j shift}) and -ys / (a e^{j shift})
            y[f][t] += c(-(g * cs - b * sn) / a, -(g * sn + b * cs) / a);
            y[t][f] += c(-(g * cs + b * sn) / a, -(b * cs - g * sn) / a);
        }
        y
    }

    #[test]
    fn assembly_identity_on_shipped_cases() {
        for name in ["case30.m", "case57.m", "case118.m", "case300.m"] {
            let case = fixtures::load(name);
            let y = build_admittance(&case).unwrap();
            let oracle = reassemble(&case);
            let dense = y.to_dense();
            let mut worst: f64 = 0.0;
            for i in 0..case.n_bus() {
                let row_sum: Complex64 = dense[i].iter().sum();
                let oracle_sum: Complex64 = oracle[i].iter().sum();
                worst = worst.max((row_sum - oracle_sum).norm());
                for j in 0..case.n_bus() {
                    worst = worst.max((dense[i][j] - oracle[i][j]).norm());
                }
            }
            let scale = dense.iter().flatten().map(|v| v.norm()).fold(1.0, f64::max);
            assert!(worst < 1e-12 * scale, "{name}: {worst} (scale {scale})");
            if name == "case30.m" {
                assert!(worst < 1e-12, "{worst}");
            }
        }
    }

    #[test]
    fn nominal_taps_give_symmetric_matrix() {
        let case = fixtures::load("case30.m");
        assert!(case.branches.iter().all(|b| b.tap == 1.0 && b.shift == 0.0));
        let y = build_admittance(&case).unwrap().to_dense();
        for (i, row) in y.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, y[j][i]);
            }
        }
    }

    #[test]
    fn branch_order_does_not_matter() {
        let case = fixtures::load("case118.m");
        let mut shuffled = case.branches.clone();
        shuffled.reverse();
        shuffled.swap(3, 90);
        let permuted = GridCase::new(case.base_mva, case.buses.clone(), shuffled, case.gens.clone()).unwrap();
        let a = build_admittance(&case).unwrap().to_dense();
        let b = build_admittance(&permuted).unwrap().to_dense();
        assert_eq!(a, b);
        assert!(case.buses.iter().any(|b| b.kind == BusType::Slack));
    }
}
