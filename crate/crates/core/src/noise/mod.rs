//! Measurement error models, per-variable normalization and the
//! variables-by-samples measurement window.

mod nig;
mod window;

pub use nig::NigSampler;
pub use window::{build_window, MeasurementWindow, WindowError, WindowMeta};

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("unknown noise model {0:?}")]
    UnknownModel(String),
    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    Length {
        what: &'static str,
        found: usize,
        expected: usize,
    },
    #[error("sigma at position {0} is not positive: {1}")]
    NonPositiveSigma(usize, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    Gaussian,
    Laplace,
    Semicircle,
    SymmetricLinear,
    Nig,
}

impl NoiseModel {
    pub const ALL: [NoiseModel; 5] = [
        NoiseModel::Gaussian,
        NoiseModel::Laplace,
        NoiseModel::Semicircle,
        NoiseModel::SymmetricLinear,
        NoiseModel::Nig,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            NoiseModel::Gaussian => "gaussian",
            NoiseModel::Laplace => "laplace",
            NoiseModel::Semicircle => "semicircle",
            NoiseModel::SymmetricLinear => "symmetric_linear",
            NoiseModel::Nig => "nig",
        }
    }

    /// One draw with zero mean and unit variance.
    pub fn sample_standard<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            NoiseModel::Gaussian => StandardNormal.sample(rng),
            NoiseModel::Laplace => {
                let u: f64 = rng.random::<f64>() - 0.5;
                -laplace_scale(1.0) * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            NoiseModel::Semicircle => semicircle_radius(1.0) * semicircle_unit_quantile(rng.random()),
            NoiseModel::SymmetricLinear => {
                let a = triangular_half_width(1.0);
                let u: f64 = rng.random();
                if u < 0.5 {
                    a * ((2.0 * u).sqrt() - 1.0)
                } else {
                    a * (1.0 - (2.0 * (1.0 - u)).sqrt())
                }
            }
            NoiseModel::Nig => NigSampler::standard().sample(rng),
        }
    }
}

impl fmt::Display for NoiseModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for NoiseModel {
    type Err = NoiseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        match key.as_str() {
            "gaussian" | "normal" => Ok(NoiseModel::Gaussian),
            "laplace" => Ok(NoiseModel::Laplace),
            "semicircle" | "semi_circle" | "sc" => Ok(NoiseModel::Semicircle),
            "symmetric_linear" | "symmetriclinear" | "sl" | "triangular" => Ok(NoiseModel::SymmetricLinear),
            "nig" | "normal_inverse_gaussian" => Ok(NoiseModel::Nig),
            _ => Err(NoiseError::UnknownModel(s.to_string())),
        }
    }
}

/// Laplace scale giving standard deviation `sigma`.
pub fn laplace_scale(sigma: f64) -> f64 {
    sigma * FRAC_1_SQRT_2
}

/// Semicircle radius giving standard deviation `sigma`.
pub fn semicircle_radius(sigma: f64) -> f64 {
    2.0 * sigma
}

/// Half-width of the symmetric triangular law giving standard deviation `sigma`.
pub fn triangular_half_width(sigma: f64) -> f64 {
    6.0f64.sqrt() * sigma
}

/// CDF of the semicircle law on `[-1, 1]`.
pub fn semicircle_unit_cdf(y: f64) -> f64 {
    let y = y.clamp(-1.0, 1.0);
    0.5 + (y * (1.0 - y * y).sqrt() + y.asin()) / PI
}

/// Inverse of [`semicircle_unit_cdf`], solved by Newton steps kept inside a
/// shrinking bracket.
fn semicircle_unit_quantile(u: f64) -> f64 {
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    // Start from the quantile of the density's small-|y| expansion.
    let mut y = ((PI / 2.0) * (u - 0.5)).clamp(-0.999, 0.999);
    for _ in 0..60 {
        let f = semicircle_unit_cdf(y) - u;
        if f.abs() < 1e-15 {
            break;
        }
        if f > 0.0 {
            hi = y;
        } else {
            lo = y;
        }
        let slope = 2.0 * (1.0 - y * y).max(0.0).sqrt() / PI;
        let step = if slope > 0.0 { y - f / slope } else { f64::NAN };
        y = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-15 {
            break;
        }
    }
    y
}

/// How the per-variable noise level is derived from a noise percentage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `sigma_i = pct * |h_i|`.
    #[default]
    StdFraction,
    /// `sigma_i^2 = pct * |h_i|`.
    LiteralVariance,
}

pub const SIGMA_FLOOR: f64 = 1e-4;

/// Per-variable standard deviations for a noise level `pct` (0.05 = 5%),
/// floored at `floor`.
pub fn sigma_from_truth(truth: &[f64], pct: f64, mode: SigmaMode, floor: f64) -> Vec<f64> {
    truth
        .iter()
        .map(|h| {
            let s = match mode {
                SigmaMode::StdFraction => pct * h.abs(),
                SigmaMode::LiteralVariance => (pct * h.abs()).sqrt(),
            };
            s.max(floor)
        })
        .collect()
}

/// Fixed per-variable offsets drawn from `U(-half_width, half_width)`.
pub fn draw_bias<R: Rng + ?Sized>(n: usize, half_width: f64, rng: &mut R) -> Vec<f64> {
    if half_width == 0.0 {
        return vec![0.0; n];
    }
    (0..n).map(|_| rng.random_range(-half_width..half_width)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub model: NoiseModel,
    sigma: Vec<f64>,
    bias: Vec<f64>,
}

impl NoiseSpec {
    pub fn new(model: NoiseModel, sigma: Vec<f64>, bias: Vec<f64>) -> Result<Self, NoiseError> {
        check_len("bias", &bias, sigma.len())?;
        check_sigma(&sigma)?;
        Ok(Self { model, sigma, bias })
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }
}

/// One error vector: `bias_i + sigma_i * e_i` with `e_i` a standardized draw
/// from the spec's model.
pub fn sample_noise<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R) -> Vec<f64> {
    spec.sigma
        .iter()
        .zip(&spec.bias)
        .map(|(s, b)| b + s * spec.model.sample_standard(rng))
        .collect()
}

fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<(), NoiseError> {
    if v.len() != expected {
        return Err(NoiseError::Length {
            what,
            found: v.len(),
            expected,
        });
    }
    Ok(())
}

fn check_sigma(sigma: &[f64]) -> Result<(), NoiseError> {
    match sigma.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
        Some(i) => Err(NoiseError::NonPositiveSigma(i, sigma[i])),
        None => Ok(()),
    }
}

/// `(z_i - bias_i) / sigma_i`.
pub fn normalize(z: &[f64], bias: &[f64], sigma: &[f64]) -> Result<Vec<f64>, NoiseError> {
    check_len("bias", bias, z.len())?;
    check_len("sigma", sigma, z.len())?;
    check_sigma(sigma)?;
    Ok(z.iter()
        .zip(bias)
        .zip(sigma)
        .map(|((z, b), s)| (z - b) / s)
        .collect())
}

/// `bias_i + sigma_i * zn_i`, the inverse of [`normalize`].
pub fn denormalize(zn: &[f64], bias: &[f64], sigma: &[f64]) -> Result<Vec<f64>, NoiseError> {
    check_len("bias", bias, zn.len())?;
    check_len("sigma", sigma, zn.len())?;
    check_sigma(sigma)?;
    Ok(zn
        .iter()
        .zip(bias)
        .zip(sigma)
        .map(|((z, b), s)| b + s * z)
        .collect())
}

static STANDARD_NIG: OnceLock<NigSampler> = OnceLock::new();

impl NigSampler {
    /// Shared zero-mean, unit-variance sampler.
    pub fn standard() -> &'static NigSampler {
        STANDARD_NIG.get_or_init(NigSampler::unit_variance)
    }
}
