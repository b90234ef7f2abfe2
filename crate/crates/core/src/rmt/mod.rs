//! Rotation-invariant eigenvalue cleaning of a measurement window.
//!
//! Conventions: for an `N x T` normalized window `Z`, the sample covariance is
//! `E = Z Z^T / T` and the aspect ratio is `q = N / T`, which must lie in
//! `(0, 1]` for cleaning. The window ratio reported to users is `T / N`.

mod spectrum;

pub use spectrum::{
    clean_spectrum, clean_window, dilation_spectrum, reconstruct_cleaned, CleanedSpectrum, WindowCleaning,
};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RmtError {
    #[error("matrix must be at least 2x2, got {0}x{1}")]
    TooSmall(usize, usize),
    #[error("non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("aspect ratio q = N/T = {0} is outside (0, 1]")]
    BadRatio(f64),
    #[error("window has {n_vars} variables but only {n_samples} samples; cleaning needs N < T")]
    TooFewSamples { n_vars: usize, n_samples: usize },
    #[error("regularizer eta must be positive, got {0}")]
    BadEta(f64),
    #[error("overlap denominator vanishes at lambda = {0}")]
    Degenerate(f64),
    #[error("cleaned singular values missing or of length {found}, expected {expected}")]
    Shape { found: usize, expected: usize },
    #[error("eigendecomposition failed")]
    Decomposition,
    #[error("cleaning produced a non-finite value at variable {0}")]
    NonFiniteOutput(usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    /// Imaginary offset used when evaluating the resolvent; `N^(-1/2)` when `None`.
    pub eta: Option<f64>,
    /// Rescale cleaned eigenvalues so that their sum equals the raw sum.
    pub preserve_trace: bool,
    /// Add the per-variable bias back when returning raw-unit measurements.
    pub restore_bias: bool,
}

impl CleanConfig {
    pub fn eta_for(&self, n: usize) -> f64 {
        self.eta.unwrap_or_else(|| 1.0 / (n as f64).sqrt())
    }
}

/// Real part `h` and density `rho` of the resolvent trace at `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StieltjesSample {
    pub lambda: f64,
    pub h: f64,
    pub rho: f64,
}

fn resolvent_terms<'a>(poles: impl Iterator<Item = &'a f64>, lambda: f64, eta: f64) -> (f64, f64) {
    let eta2 = eta * eta;
    poles.fold((0.0, 0.0), |(re, im), &p| {
        let d = lambda - p;
        let den = d * d + eta2;
        (re + d / den, im + eta / den)
    })
}

/// `g = (1/N) sum_j 1 / ((lambda - i eta) - lambda_j)`, returning `h = Re g`
/// and `rho = Im g / pi`.
pub fn stieltjes_at(eigs: &[f64], lambda: f64, eta: f64) -> StieltjesSample {
    let n = eigs.len() as f64;
    let (re, im) = resolvent_terms(eigs.iter(), lambda, eta);
    StieltjesSample {
        lambda,
        h: re / n,
        rho: im / (n * PI),
    }
}

/// As [`stieltjes_at`] at `eigs[i]`, leaving out the pole at `i` itself. The
/// prefactor stays `1/N`.
pub fn stieltjes_excluding(eigs: &[f64], i: usize, eta: f64) -> StieltjesSample {
    let n = eigs.len() as f64;
    let lambda = eigs[i];
    let (re, im) = resolvent_terms(
        eigs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p),
        lambda,
        eta,
    );
    StieltjesSample {
        lambda,
        h: re / n,
        rho: im / (n * PI),
    }
}

/// Support `(a, b)` of the Marchenko-Pastur law for ratio `q` and entry
/// variance `sigma^2`.
pub fn mp_edges(q: f64, sigma: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    let r = q.sqrt();
    (s2 * (1.0 - r).powi(2), s2 * (1.0 + r).powi(2))
}

/// Marchenko-Pastur density of the eigenvalues of `G G^T / T` for an
/// `N x T` matrix `G` with i.i.d. `N(0, sigma^2)` entries and `q = N/T`.
pub fn mp_density(lambda: f64, q: f64, sigma: f64) -> f64 {
    let (a, b) = mp_edges(q, sigma);
    if lambda <= a || lambda >= b {
        return 0.0;
    }
    ((b - lambda) * (lambda - a)).sqrt() / (2.0 * PI * lambda * q * sigma * sigma)
}

/// Cumulative distribution of [`mp_density`] (continuous part), by midpoint
/// quadrature in the angle variable `lambda = a + (b - a)(1 - cos t)/2`.
pub fn mp_cdf(lambda: f64, q: f64, sigma: f64) -> f64 {
    let (a, b) = mp_edges(q, sigma);
    if lambda <= a {
        return 0.0;
    }
    if lambda >= b {
        return mp_mass(q, sigma);
    }
    let half = 0.5 * (b - a);
    let t_end = (1.0 - (lambda - a) / half).clamp(-1.0, 1.0).acos();
    angle_integral(a, half, q, sigma, t_end)
}

fn mp_mass(q: f64, sigma: f64) -> f64 {
    let (a, b) = mp_edges(q, sigma);
    angle_integral(a, 0.5 * (b - a), q, sigma, PI)
}

fn angle_integral(a: f64, half: f64, q: f64, sigma: f64, t_end: f64) -> f64 {
    let steps = 4000;
    let dt = t_end / steps as f64;
    let norm = 2.0 * PI * q * sigma * sigma;
    (0..steps)
        .map(|k| {
            let t = (k as f64 + 0.5) * dt;
            let s = t.sin();
            let lambda = a + half * (1.0 - t.cos());
            half * half * s * s / (norm * lambda)
        })
        .sum::<f64>()
        * dt
}

/// One eigenvalue of `E` with the resolvent values used to clean it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanedEigenvalue {
    pub lambda: f64,
    pub h: f64,
    pub rho: f64,
    pub xi: f64,
}

/// Shrinkage of one eigenvalue given its resolvent sample.
pub fn shrink(s: &StieltjesSample, q: f64) -> f64 {
    let (lambda, h, rho) = (s.lambda, s.h, s.rho);
    let pr = PI * rho;
    let phi = 1.0 - h * (lambda - (1.0 - q)) - q * lambda * (pr * pr - h * h);
    (1.0 - q * h) * (lambda - (1.0 - q) - 2.0 * q * lambda * h) + q * phi
}

/// Cleans every eigenvalue in `eigs` (eigenvalues of `E`, any order).
/// Negative outputs are clipped to zero.
pub fn clean_eigenvalues(eigs: &[f64], q: f64, cfg: &CleanConfig) -> Result<Vec<CleanedEigenvalue>, RmtError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(RmtError::BadRatio(q));
    }
    let eta = cfg.eta_for(eigs.len());
    if !(eta > 0.0) {
        return Err(RmtError::BadEta(eta));
    }
    let mut out: Vec<CleanedEigenvalue> = (0..eigs.len())
        .map(|i| {
            let s = stieltjes_excluding(eigs, i, eta);
            CleanedEigenvalue {
                lambda: s.lambda,
                h: s.h,
                rho: s.rho,
                xi: shrink(&s, q).max(0.0),
            }
        })
        .collect();
    if let Some(i) = out.iter().position(|c| !c.xi.is_finite()) {
        return Err(RmtError::NonFiniteOutput(i));
    }
    if cfg.preserve_trace {
        let raw: f64 = eigs.iter().sum();
        let cleaned: f64 = out.iter().map(|c| c.xi).sum();
        if cleaned > 0.0 {
            let k = raw / cleaned;
            out.iter_mut().for_each(|c| c.xi *= k);
        }
    }
    Ok(out)
}

/// Expected squared overlap between a sample eigenvector at `lambda` and a
/// population eigenvector with eigenvalue `c`, scaled by `N` (so pure noise
/// gives values near one).
pub fn oracle_overlap(lambda: f64, c: f64, q: f64, h: f64, rho: f64) -> Result<f64, RmtError> {
    let pr = PI * rho;
    let alpha = (1.0 - q * h).powi(2) + q * q * pr * pr;
    let shifted = lambda * alpha + c;
    let beta = shifted * (1.0 - q) * h - alpha * (1.0 - q);
    let gamma = shifted * q * pr;
    let den = beta * beta + gamma * gamma;
    if !(den > f64::MIN_POSITIVE) {
        return Err(RmtError::Degenerate(lambda));
    }
    Ok(q * alpha * alpha * shifted / den)
}

/// CSV rows `lambda,h,rho,xi` for plotting.
pub fn diagnostics_csv(eigs: &[CleanedEigenvalue]) -> String {
    let mut out = String::from("lambda,h,rho,xi\n");
    for e in eigs {
        out.push_str(&format!("{},{},{},{}\n", e.lambda, e.h, e.rho, e.xi));
    }
    out
}
