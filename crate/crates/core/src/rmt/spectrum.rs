use faer::{Mat, MatRef, Side};

use super::{clean_eigenvalues, CleanConfig, CleanedEigenvalue, RmtError};
use crate::noise::MeasurementWindow;

/// Singular triplets of an `N x T` matrix and, once cleaned, the shrunk
/// singular values. The dilation `[[0, Z], [Z^T, 0]]` has eigenvalues
/// `+-raw_sv` plus `|T - N|` zeros.
#[derive(Debug, Clone)]
pub struct CleanedSpectrum {
    n_rows: usize,
    n_cols: usize,
    /// Nonincreasing, length `min(N, T)`.
    pub raw_sv: Vec<f64>,
    pub cleaned_sv: Option<Vec<f64>>,
    /// `N x k` left singular vectors, columns matching `raw_sv`.
    pub left: Mat<f64>,
    /// `T x k` right singular vectors.
    pub right: Mat<f64>,
    /// Singular values at or below this are treated as exact zeros.
    pub rank_tol: f64,
    pub eta: Option<f64>,
    pub eigen: Vec<CleanedEigenvalue>,
}

impl CleanedSpectrum {
    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    /// `N / T`.
    pub fn ratio(&self) -> f64 {
        self.n_rows as f64 / self.n_cols as f64
    }

    /// Eigenvalues of the dilation matrix, descending.
    pub fn dilation_eigenvalues(&self) -> Vec<f64> {
        let zeros = self.n_rows.abs_diff(self.n_cols);
        let mut out: Vec<f64> = self.raw_sv.clone();
        out.extend(std::iter::repeat_n(0.0, zeros));
        out.extend(self.raw_sv.iter().rev().map(|s| -s));
        out
    }

    /// Eigenvalues of `E = Z Z^T / T`, descending (`N - k` trailing zeros
    /// when `N > T`).
    pub fn covariance_eigenvalues(&self) -> Vec<f64> {
        let t = self.n_cols as f64;
        let mut out: Vec<f64> = self.raw_sv.iter().map(|s| s * s / t).collect();
        out.resize(self.n_rows, 0.0);
        out
    }
}

fn check_input(z: MatRef<'_, f64>) -> Result<(), RmtError> {
    let (n, t) = (z.nrows(), z.ncols());
    if n < 2 || t < 2 {
        return Err(RmtError::TooSmall(n, t));
    }
    for j in 0..t {
        for i in 0..n {
            if !z[(i, j)].is_finite() {
                return Err(RmtError::NonFinite(i, j));
            }
        }
    }
    Ok(())
}

fn rank_tolerance(n: usize, t: usize, s_max: f64) -> f64 {
    n.max(t) as f64 * f64::EPSILON * s_max
}

/// Thin singular value decomposition of `z`.
pub fn dilation_spectrum(z: MatRef<'_, f64>) -> Result<CleanedSpectrum, RmtError> {
    check_input(z)?;
    let (n, t) = (z.nrows(), z.ncols());
    let svd = z.thin_svd().map_err(|_| RmtError::Decomposition)?;
    let s = svd.S().column_vector();
    let k = n.min(t);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let raw_sv: Vec<f64> = order.iter().map(|&i| s[i].max(0.0)).collect();
    let (u, v) = (svd.U(), svd.V());
    let left = Mat::from_fn(n, k, |i, c| u[(i, order[c])]);
    let right = Mat::from_fn(t, k, |i, c| v[(i, order[c])]);
    let rank_tol = rank_tolerance(n, t, raw_sv.first().copied().unwrap_or(0.0));
    Ok(CleanedSpectrum {
        n_rows: n,
        n_cols: t,
        raw_sv,
        cleaned_sv: None,
        left,
        right,
        rank_tol,
        eta: None,
        eigen: Vec::new(),
    })
}

/// Shrinks the covariance eigenvalues and stores `sqrt(T * xi)` as the
/// cleaned singular values. Numerically zero singular values stay zero.
pub fn clean_spectrum(mut spec: CleanedSpectrum, cfg: &CleanConfig) -> Result<CleanedSpectrum, RmtError> {
    let (n, t) = spec.shape();
    let q = n as f64 / t as f64;
    let eigs = spec.covariance_eigenvalues();
    let cleaned = clean_eigenvalues(&eigs, q, cfg)?;
    let tf = t as f64;
    let sv = spec
        .raw_sv
        .iter()
        .zip(&cleaned)
        .map(|(&s, c)| if s <= spec.rank_tol { 0.0 } else { (tf * c.xi).sqrt() })
        .collect();
    spec.cleaned_sv = Some(sv);
    spec.eta = Some(cfg.eta_for(n));
    spec.eigen = cleaned;
    Ok(spec)
}

/// `sum_i cleaned_sv_i * left_i * right_i^T`.
pub fn reconstruct_cleaned(spec: &CleanedSpectrum) -> Result<Mat<f64>, RmtError> {
    let k = spec.raw_sv.len();
    let sv = match &spec.cleaned_sv {
        Some(sv) if sv.len() == k => sv,
        other => {
            return Err(RmtError::Shape {
                found: other.as_ref().map_or(0, |v| v.len()),
                expected: k,
            })
        }
    };
    let scaled = Mat::from_fn(spec.left.nrows(), k, |i, c| spec.left[(i, c)] * sv[c]);
    Ok(&scaled * spec.right.transpose())
}

/// Result of cleaning one window.
#[derive(Debug, Clone)]
pub struct WindowCleaning {
    /// Cleaned current sample in normalized units.
    pub normalized: Vec<f64>,
    /// Cleaned current sample in measurement units.
    pub measurements: Vec<f64>,
    /// Per-eigenvalue diagnostics, ascending in `lambda`.
    pub eigen: Vec<CleanedEigenvalue>,
    pub q: f64,
    pub eta: f64,
}

/// Cleans a window and returns its last column.
///
/// Works from the eigendecomposition of `Z Z^T`: with `Z = U S V^T`, the last
/// column of the cleaned matrix is `U diag(s'/s) U^T z_T`, so the right
/// singular vectors are never formed.
pub fn clean_window(window: &MeasurementWindow, cfg: &CleanConfig) -> Result<WindowCleaning, RmtError> {
    let (n, t) = (window.n_vars(), window.n_samples());
    if n >= t {
        return Err(RmtError::TooFewSamples {
            n_vars: n,
            n_samples: t,
        });
    }
    let data = window.data();
    let z = MatRef::from_column_major_slice(data, n, t);
    check_input(z)?;

    let gram = z * z.transpose();
    let evd = gram.self_adjoint_eigen(Side::Lower).map_err(|_| RmtError::Decomposition)?;
    let u = evd.U();
    let ev = evd.S().column_vector();
    let tf = t as f64;
    let sq: Vec<f64> = (0..n).map(|i| ev[i].max(0.0)).collect();
    let s_max = sq.iter().fold(0.0f64, |m, &x| m.max(x)).sqrt();
    // Squaring the window limits relative accuracy of small singular values
    // to about sqrt(N * eps).
    let tol = rank_tolerance(n, t, s_max).max((n as f64 * f64::EPSILON).sqrt() * s_max);

    let eigs: Vec<f64> = sq.iter().map(|x| x / tf).collect();
    let q = n as f64 / tf;
    let cleaned = clean_eigenvalues(&eigs, q, cfg)?;

    let last = window.last_column();
    let mut coeffs = vec![0.0; n];
    for c in 0..n {
        let s = sq[c].sqrt();
        if s <= tol {
            continue;
        }
        let ratio = (tf * cleaned[c].xi).sqrt() / s;
        let proj: f64 = (0..n).map(|i| u[(i, c)] * last[i]).sum();
        coeffs[c] = ratio * proj;
    }
    let mut normalized = vec![0.0; n];
    for (c, &w) in coeffs.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (i, out) in normalized.iter_mut().enumerate() {
            *out += u[(i, c)] * w;
        }
    }
    if let Some(i) = normalized.iter().position(|x| !x.is_finite()) {
        return Err(RmtError::NonFiniteOutput(i));
    }
    let measurements = normalized
        .iter()
        .zip(window.sigma())
        .zip(window.bias())
        .map(|((g, s), b)| if cfg.restore_bias { b + s * g } else { s * g })
        .collect();
    Ok(WindowCleaning {
        normalized,
        measurements,
        eigen: cleaned,
        q,
        eta: cfg.eta_for(n),
    })
}
