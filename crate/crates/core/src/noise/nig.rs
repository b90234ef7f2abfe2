use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp};

/// Normal-inverse Gaussian parameters: tail steepness `alpha`, skewness
/// `beta`, scale `delta` and location `mu`, with `gamma = sqrt(alpha^2 - beta^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NigParams {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub mu: f64,
}

impl NigParams {
    /// Mean zero, variance two.
    pub const SKEWED: NigParams = NigParams {
        alpha: std::f64::consts::SQRT_2,
        beta: 1.0,
        delta: 1.0,
        mu: -1.0,
    };

    pub fn gamma(&self) -> f64 {
        (self.alpha * self.alpha - self.beta * self.beta).max(0.0).sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.mu + self.delta * self.beta / self.gamma()
    }

    pub fn variance(&self) -> f64 {
        self.delta * self.alpha * self.alpha / self.gamma().powi(3)
    }

    pub fn ln_density(&self, x: f64) -> f64 {
        let d = x - self.mu;
        let s = (self.delta * self.delta + d * d).sqrt();
        let z = self.alpha * s;
        (self.alpha * self.delta / PI).ln() - s.ln() + scaled_bessel_k1(z).ln() - z
            + self.delta * self.gamma()
            + self.beta * d
    }

    pub fn density(&self, x: f64) -> f64 {
        self.ln_density(x).exp()
    }
}

/// `K1(z) * e^z` for `z > 0`, from the integral
/// `K1(z) = int_0^inf exp(-z cosh t) cosh t dt` by the trapezoid rule, which
/// converges geometrically for this smooth, rapidly decaying integrand.
pub fn scaled_bessel_k1(z: f64) -> f64 {
    debug_assert!(z > 0.0);
    let h = 0.05;
    let mut sum = 0.5;
    let mut k = 1;
    loop {
        let t = k as f64 * h;
        let c = t.cosh();
        let e = z * (c - 1.0);
        let term = (-e).exp() * c;
        sum += term;
        if e > 45.0 + t {
            break;
        }
        k += 1;
    }
    sum * h
}

/// Rejection sampler from an asymmetric Laplace envelope whose two decay
/// rates match the tails of the target.
#[derive(Debug, Clone)]
pub struct NigSampler {
    params: NigParams,
    scale: f64,
    shift: f64,
    rate_left: f64,
    rate_right: f64,
    ln_bound: f64,
}

impl NigSampler {
    pub fn new(params: NigParams) -> Self {
        let rate_left = params.alpha + params.beta;
        let rate_right = params.alpha - params.beta;
        assert!(rate_right > 0.0 && rate_left > 0.0, "NIG tails must decay exponentially");
        let mut sampler = Self {
            params,
            scale: 1.0,
            shift: 0.0,
            rate_left,
            rate_right,
            ln_bound: 0.0,
        };
        let mut worst = f64::NEG_INFINITY;
        let (lo, hi) = (params.mu - 60.0 / rate_left, params.mu + 60.0 / rate_right);
        let steps = 40_000;
        for i in 0..=steps {
            let x = lo + (hi - lo) * i as f64 / steps as f64;
            worst = worst.max(params.ln_density(x) - sampler.ln_envelope(x));
        }
        sampler.ln_bound = worst + 0.01;
        sampler
    }

    /// Standardized version of [`NigParams::SKEWED`]: zero mean, unit variance.
    pub fn unit_variance() -> Self {
        let p = NigParams::SKEWED;
        let mut s = Self::new(p);
        s.scale = 1.0 / p.variance().sqrt();
        s.shift = -p.mean();
        s
    }

    pub fn params(&self) -> NigParams {
        self.params
    }

    fn ln_envelope(&self, x: f64) -> f64 {
        let (l, r) = (self.rate_left, self.rate_right);
        let norm = (l * r / (l + r)).ln();
        let d = x - self.params.mu;
        if d >= 0.0 {
            norm - r * d
        } else {
            norm + l * d
        }
    }

    /// Draw from the unscaled law.
    pub fn sample_raw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (l, r) = (self.rate_left, self.rate_right);
        let right = Exp::new(r).expect("positive rate");
        let left = Exp::new(l).expect("positive rate");
        loop {
            let x = if rng.random::<f64>() < l / (l + r) {
                self.params.mu + right.sample(rng)
            } else {
                self.params.mu - left.sample(rng)
            };
            let ln_accept = self.params.ln_density(x) - self.ln_envelope(x) - self.ln_bound;
            if rng.random::<f64>().ln() < ln_accept {
                return x;
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        (self.sample_raw(rng) + self.shift) * self.scale
    }
}
