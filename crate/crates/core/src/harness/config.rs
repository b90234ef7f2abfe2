use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::estimator::WlsConfig;
use crate::noise::{NoiseModel, SigmaMode, SIGMA_FLOOR};
use crate::powerflow::MeasurementKind;
use crate::rmt::CleanConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Baseline,
    QSweep,
    NoiseModels,
    Divided,
    TimeVarying,
    VarianceError,
}

impl Scenario {
    pub fn tag(self) -> &'static str {
        match self {
            Scenario::Baseline => "baseline",
            Scenario::QSweep => "q_sweep",
            Scenario::NoiseModels => "noise_models",
            Scenario::Divided => "divided",
            Scenario::TimeVarying => "time_varying",
            Scenario::VarianceError => "variance_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Noise level on power measurements, as a fraction of the true value.
    pub flow_pct: f64,
    /// Noise level on voltage magnitudes.
    pub vm_pct: f64,
    pub model: NoiseModel,
    /// Per-variable bias is drawn from `U(-bias_range, bias_range)`.
    pub bias_range: f64,
    pub sigma_mode: SigmaMode,
    pub sigma_floor: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            flow_pct: 0.05,
            vm_pct: 0.01,
            model: NoiseModel::Gaussian,
            bias_range: 0.03,
            sigma_mode: SigmaMode::StdFraction,
            sigma_floor: SIGMA_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QSweepConfig {
    /// Window ratios `T / N` to evaluate.
    pub ratios: Vec<f64>,
}

impl Default for QSweepConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.5, 1.2, 4.0, 8.0, 20.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModelsConfig {
    pub models: Vec<NoiseModel>,
}

impl Default for NoiseModelsConfig {
    fn default() -> Self {
        Self {
            models: vec![
                NoiseModel::Laplace,
                NoiseModel::Semicircle,
                NoiseModel::SymmetricLinear,
                NoiseModel::Nig,
                NoiseModel::Gaussian,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DividedConfig {
    /// Partition of measurement kinds; each group is cleaned on its own.
    pub groups: Vec<Vec<MeasurementKind>>,
}

impl Default for DividedConfig {
    fn default() -> Self {
        Self {
            groups: MeasurementKind::ALL.iter().map(|k| vec![*k]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileShape {
    Constant,
    /// Linear change of the load multiplier by `total_change` from the first
    /// to the last simulated sample.
    Ramp { total_change: f64 },
    /// `1 + amplitude * sin(2 pi k / period)` with `k` the sample index.
    Sine { amplitude: f64, period: f64 },
}

impl ProfileShape {
    pub fn multiplier(&self, k: usize, n_samples: usize) -> f64 {
        match *self {
            ProfileShape::Constant => 1.0,
            ProfileShape::Ramp { total_change } => {
                let span = n_samples.saturating_sub(1).max(1) as f64;
                1.0 + total_change * k as f64 / span
            }
            ProfileShape::Sine { amplitude, period } => {
                1.0 + amplitude * (2.0 * std::f64::consts::PI * k as f64 / period).sin()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    /// External bus number.
    pub bus: usize,
    #[serde(flatten)]
    pub shape: ProfileShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeVaryingConfig {
    /// Number of consecutive estimates; the window slides by one sample each step.
    pub steps: usize,
    pub profiles: Vec<LoadProfile>,
}

impl Default for TimeVaryingConfig {
    fn default() -> Self {
        Self {
            steps: 6,
            profiles: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorSign {
    /// Assumed sigma larger than the true one.
    #[default]
    Plus,
    Minus,
    /// Independent random sign per variable.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceErrorConfig {
    pub ratios: Vec<f64>,
    pub sign: ErrorSign,
}

impl Default for VarianceErrorConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            sign: ErrorSign::Plus,
        }
    }
}

fn default_ratio() -> f64 {
    1.2
}

fn default_trials() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    /// Resolved against the config file's directory when relative.
    pub case_path: PathBuf,
    pub scenario: Scenario,
    #[serde(default)]
    pub noise: NoiseConfig,
    /// Samples per measured variable, `T / N`.
    #[serde(default = "default_ratio")]
    pub window_ratio: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Allows cases with more than 300 buses.
    #[serde(default)]
    pub extended: bool,
    #[serde(default)]
    pub wls: WlsConfig,
    #[serde(default)]
    pub cleaning: CleanConfig,
    #[serde(default)]
    pub q_sweep: QSweepConfig,
    #[serde(default)]
    pub noise_models: NoiseModelsConfig,
    #[serde(default)]
    pub divided: DividedConfig,
    #[serde(default)]
    pub time_varying: TimeVaryingConfig,
    #[serde(default)]
    pub variance_error: VarianceErrorConfig,
}

impl ExperimentConfig {
    pub fn new(case_path: impl Into<PathBuf>, scenario: Scenario) -> Self {
        Self {
            name: None,
            case_path: case_path.into(),
            scenario,
            noise: NoiseConfig::default(),
            window_ratio: default_ratio(),
            trials: default_trials(),
            seed: 0,
            extended: false,
            wls: WlsConfig::default(),
            cleaning: CleanConfig::default(),
            q_sweep: QSweepConfig::default(),
            noise_models: NoiseModelsConfig::default(),
            divided: DividedConfig::default(),
            time_varying: TimeVaryingConfig::default(),
            variance_error: VarianceErrorConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config; a relative `case_path` is taken relative to the
    /// file's directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        if cfg.case_path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.case_path = dir.join(&cfg.case_path);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.trials < 1 {
            return bad("trials must be at least 1".into());
        }
        if !(self.window_ratio > 0.0) {
            return bad(format!("window_ratio must be positive, got {}", self.window_ratio));
        }
        let n = &self.noise;
        if !(n.flow_pct >= 0.0 && n.vm_pct >= 0.0) {
            return bad("noise percentages must be non-negative".into());
        }
        if !(n.bias_range >= 0.0) {
            return bad("bias_range must be non-negative".into());
        }
        if !(n.sigma_floor > 0.0) {
            return bad("sigma_floor must be positive".into());
        }
        if self.q_sweep.ratios.iter().any(|r| !(*r > 0.0)) {
            return bad("q_sweep ratios must be positive".into());
        }
        if self.variance_error.ratios.iter().any(|r| !(*r >= 0.0 && *r < 1.0)) {
            return bad("variance_error ratios must lie in [0, 1)".into());
        }
        if self.time_varying.steps < 1 {
            return bad("time_varying.steps must be at least 1".into());
        }
        let mut seen = std::collections::HashSet::new();
        for g in &self.divided.groups {
            if g.is_empty() {
                return bad("divided groups must not be empty".into());
            }
            for k in g {
                if !seen.insert(*k) {
                    return bad(format!("measurement kind {} appears in two groups", k.label()));
                }
            }
        }
        self.wls.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }
}
