//! Experiment runner: synthesizes measurement windows around a power-flow
//! solution and compares plain and two-stage estimates over seeded trials.
//!
//! Trial `k` draws from a ChaCha8 generator keyed by the master seed with its
//! stream set to `k`. Within a trial the draw order is fixed: the bias vector,
//! then the window columns oldest first (each column in plan order), then the
//! starting state(s) of the estimator.

mod config;
mod report;

pub use config::{
    DividedConfig, ErrorSign, ExperimentConfig, LoadProfile, NoiseConfig, NoiseModelsConfig, ProfileShape,
    QSweepConfig, Scenario, TimeVaryingConfig, VarianceErrorConfig,
};
pub use report::{
    emit_report, Aggregate, ExperimentReport, GroupReport, KindMae, PartitionStats, ReportFormat, ResidualRow,
    TrialMetrics, TrialResult,
};

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::estimator::{error_decomposition, Estimator, EstimatorError};
use crate::grid::{CaseError, GridCase};
use crate::noise::{
    build_window, draw_bias, sigma_from_truth, MeasurementWindow, NoiseError, NoiseModel, NoiseSpec, WindowError,
};
use crate::powerflow::{
    solve_power_flow, solve_power_flow_with, MeasurementKind, MeasurementPlan, OperatingState, PowerFlowError,
    PowerFlowOptions,
};
use crate::rmt::{clean_window, CleanedEigenvalue, RmtError};

type CleanedSnapshot = (Vec<f64>, Vec<CleanedEigenvalue>);

/// Cases above this many buses only run with `extended` set.
pub const EXTENDED_THRESHOLD: usize = 300;

/// Stream offset for the per-variable signs of the variance-error scenario,
/// kept apart from the trial streams.
const SIGN_STREAM: u64 = 1 << 63;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("case has {n_bus} buses; cases above {EXTENDED_THRESHOLD} buses need the extended flag")]
    ExtendedCase { n_bus: usize },
    #[error("vectors differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("mean absolute error of empty vectors")]
    Empty,
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Cleaning(#[from] RmtError),
}

/// `(1/n) sum |a_i - b_i|`.
pub fn mae(a: &[f64], b: &[f64]) -> Result<f64, HarnessError> {
    if a.len() != b.len() {
        return Err(HarnessError::Length(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(HarnessError::Empty);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Relative improvement of the two-stage estimate over plain WLS.
pub fn inc_rat(wls_mae: f64, rwls_mae: f64) -> f64 {
    (wls_mae - rwls_mae) / wls_mae
}

/// Generator for trial `trial` under master seed `seed`.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Window length for ratio `r` over `n` variables (at least two samples).
pub fn window_len(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).max(2)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    Experiment::prepare(cfg)?.run()
}

pub fn run_baseline(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    Experiment::prepare(cfg)?.run_scenario(Scenario::Baseline)
}

pub fn run_q_sweep(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    Experiment::prepare(cfg)?.run_scenario(Scenario::QSweep)
}

pub fn run_noise_models(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    Experiment::prepare(cfg)?.run_scenario(Scenario::NoiseModels)
}

pub fn run_divided(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    Experiment::prepare(cfg)?.run_scenario(Scenario::Divided)
}

pub fn run_time_varying(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    Experiment::prepare(cfg)?.run_scenario(Scenario::TimeVarying)
}

pub fn run_variance_error(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    Experiment::prepare(cfg)?.run_scenario(Scenario::VarianceError)
}

/// True operating point of one simulated sample.
#[derive(Debug, Clone)]
pub struct ColumnTruth {
    pub state: OperatingState,
    pub measurements: Vec<f64>,
    /// Largest power mismatch of the solved column, p.u.
    pub mismatch: f64,
}

/// What one scenario group produced for one trial.
struct GroupOutcome {
    metrics: TrialMetrics,
    spectrum: Vec<CleanedEigenvalue>,
    trace: Vec<ResidualRow>,
    partition: Vec<PartitionStats>,
    wall_ms: f64,
}

struct Scored<'a> {
    z: &'a [f64],
    bias: &'a [f64],
    sigma: &'a [f64],
    /// `None` when the cleaner refused the window.
    cleaned: Option<&'a [f64]>,
    truth: &'a OperatingState,
    h_true: &'a [f64],
    start: &'a OperatingState,
}

/// A loaded case with its true operating point and noise levels.
pub struct Experiment {
    cfg: ExperimentConfig,
    case: GridCase,
    est: Estimator,
    truth: ColumnTruth,
    sigma: Vec<f64>,
    /// Noise amplitude per variable; zero for rows whose level is zero.
    amplitude: Vec<f64>,
}

impl Experiment {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let case = GridCase::from_path(&cfg.case_path)?;
        Self::with_case(cfg, case)
    }

    pub fn with_case(cfg: &ExperimentConfig, case: GridCase) -> Result<Self, HarnessError> {
        cfg.validate()?;
        if case.n_bus() > EXTENDED_THRESHOLD && !cfg.extended {
            return Err(HarnessError::ExtendedCase { n_bus: case.n_bus() });
        }
        let est = Estimator::new(&case, MeasurementPlan::full_scada(&case))?;
        let pf = solve_power_flow(&case, est.admittance())?;
        let h = est.measure(&pf.state);
        let (sigma, amplitude) = noise_levels(&cfg.noise, est.plan(), &h);
        Ok(Self {
            cfg: cfg.clone(),
            case,
            est,
            truth: ColumnTruth {
                state: pf.state,
                measurements: h,
                mismatch: pf.max_mismatch,
            },
            sigma,
            amplitude,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn estimator(&self) -> &Estimator {
        &self.est
    }

    pub fn truth(&self) -> &ColumnTruth {
        &self.truth
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn n_vars(&self) -> usize {
        self.est.plan().len()
    }

    /// The window that trial `trial` of the baseline scenario cleans, tagged
    /// with the master seed.
    pub fn synthetic_window(&self, trial: usize) -> Result<MeasurementWindow, HarnessError> {
        let mut rng = trial_rng(self.cfg.seed, trial);
        let t = window_len(self.cfg.window_ratio, self.n_vars());
        let h = &self.truth.measurements;
        let (bias, columns) = self.draw_columns(|_| h, t, self.cfg.noise.model, &mut rng);
        let spec = NoiseSpec::new(self.cfg.noise.model, self.sigma.clone(), bias)?;
        let window = build_window(&columns, &spec, self.est.plan())?;
        Ok(window.with_seed(self.cfg.seed))
    }

    pub fn run(&self) -> Result<ExperimentReport, HarnessError> {
        self.run_scenario(self.cfg.scenario)
    }

    /// Runs `scenario` regardless of the scenario named in the config.
    pub fn run_scenario(&self, scenario: Scenario) -> Result<ExperimentReport, HarnessError> {
        let started = Instant::now();
        let groups = match scenario {
            Scenario::Baseline => self.baseline_groups(),
            Scenario::QSweep => self.q_sweep_groups(),
            Scenario::NoiseModels => self.noise_model_groups(),
            Scenario::Divided => self.divided_groups(),
            Scenario::TimeVarying => self.time_varying_groups()?,
            Scenario::VarianceError => self.variance_groups(),
        };
        let mut config = self.cfg.clone();
        config.scenario = scenario;
        Ok(ExperimentReport {
            config,
            case_hash: self.est.case_hash().to_string(),
            plan_hash: self.est.plan().content_hash(),
            n_bus: self.case.n_bus(),
            n_vars: self.n_vars(),
            groups,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn baseline_groups(&self) -> Vec<GroupReport> {
        let t = window_len(self.cfg.window_ratio, self.n_vars());
        let label = GroupLabel::new("baseline", Some(self.cfg.window_ratio), t);
        let model = self.cfg.noise.model;
        self.collect(vec![label], |trial| {
            vec![self.standard_trial(trial, t, model, &self.sigma)]
        })
    }

    fn q_sweep_groups(&self) -> Vec<GroupReport> {
        let n = self.n_vars();
        let ratios = &self.cfg.q_sweep.ratios;
        let labels = ratios
            .iter()
            .map(|r| GroupLabel::new(format!("r={r}"), Some(*r), window_len(*r, n)))
            .collect();
        let model = self.cfg.noise.model;
        let mut groups = self.collect(labels, |trial| {
            ratios
                .iter()
                .map(|r| self.standard_trial(trial, window_len(*r, n), model, &self.sigma))
                .collect()
        });
        for g in &mut groups {
            if g.n_samples <= g.n_vars {
                g.degraded = true;
                g.notes.push(format!(
                    "window {}x{} has ratio <= 1; cleaning refused and the raw estimate is reported for the two-stage column",
                    g.n_vars, g.n_samples
                ));
            }
        }
        groups
    }

    fn noise_model_groups(&self) -> Vec<GroupReport> {
        let t = window_len(self.cfg.window_ratio, self.n_vars());
        let models = &self.cfg.noise_models.models;
        let labels = models
            .iter()
            .map(|m| GroupLabel::new(m.tag(), None, t))
            .collect();
        self.collect(labels, |trial| {
            models
                .iter()
                .map(|m| self.standard_trial(trial, t, *m, &self.sigma))
                .collect()
        })
    }

    fn variance_groups(&self) -> Vec<GroupReport> {
        let t = window_len(self.cfg.window_ratio, self.n_vars());
        let ve = &self.cfg.variance_error;
        let labels = ve
            .ratios
            .iter()
            .map(|r| GroupLabel::new(format!("ratio={r}"), Some(*r), t))
            .collect();
        let model = self.cfg.noise.model;
        self.collect(labels, |trial| {
            let signs = self.error_signs(trial);
            ve.ratios
                .iter()
                .map(|ratio| {
                    let assumed: Vec<f64> = self
                        .sigma
                        .iter()
                        .zip(&signs)
                        .map(|(s, sign)| s * (1.0 + sign * ratio))
                        .collect();
                    self.standard_trial(trial, t, model, &assumed)
                })
                .collect()
        })
    }

    fn error_signs(&self, trial: usize) -> Vec<f64> {
        let n = self.n_vars();
        match self.cfg.variance_error.sign {
            ErrorSign::Plus => vec![1.0; n],
            ErrorSign::Minus => vec![-1.0; n],
            ErrorSign::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                rng.set_stream(SIGN_STREAM | trial as u64);
                (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
            }
        }
    }

    /// One trial with a quasi-static truth: `t` noisy copies of the true
    /// measurement vector, the last one being the current snapshot.
    fn standard_trial(
        &self,
        trial: usize,
        t: usize,
        model: NoiseModel,
        assumed_sigma: &[f64],
    ) -> Result<GroupOutcome, HarnessError> {
        let clock = Instant::now();
        let mut rng = trial_rng(self.cfg.seed, trial);
        let h = &self.truth.measurements;
        let (bias, columns) = self.draw_columns(|_| h, t, model, &mut rng);
        let start = self.est.initial_state(&self.cfg.wls.init, &mut rng)?;
        let cleaning = self.clean(&columns, &bias, assumed_sigma, model, self.est.plan())?;
        let z = columns.last().expect("window has columns");
        let mut out = self.score(Scored {
            z,
            bias: &bias,
            sigma: assumed_sigma,
            cleaned: cleaning.as_ref().map(|c| c.0.as_slice()),
            truth: &self.truth.state,
            h_true: h,
            start: &start,
        })?;
        if let Some((_, eigen)) = cleaning {
            out.spectrum = eigen;
        }
        out.wall_ms = clock.elapsed().as_secs_f64() * 1e3;
        Ok(out)
    }

    fn divided_groups(&self) -> Vec<GroupReport> {
        let n = self.n_vars();
        let t = window_len(self.cfg.window_ratio, n);
        let labels = vec![
            GroupLabel::new("undivided", Some(self.cfg.window_ratio), t),
            GroupLabel::new("divided", Some(self.cfg.window_ratio), t),
        ];
        self.collect(labels, |trial| match self.divided_trial(trial, t) {
            Ok(pair) => pair.into_iter().map(Ok).collect(),
            Err(e) => {
                let msg = e.to_string();
                vec![Err(HarnessError::Config(msg.clone())), Err(HarnessError::Config(msg))]
            }
        })
    }

    fn divided_trial(&self, trial: usize, t: usize) -> Result<Vec<GroupOutcome>, HarnessError> {
        let clock = Instant::now();
        let model = self.cfg.noise.model;
        let mut rng = trial_rng(self.cfg.seed, trial);
        let h = &self.truth.measurements;
        let (bias, columns) = self.draw_columns(|_| h, t, model, &mut rng);
        let start = self.est.initial_state(&self.cfg.wls.init, &mut rng)?;
        let z = columns.last().expect("window has columns");

        let whole = self.clean(&columns, &bias, &self.sigma, model, self.est.plan())?;
        let mut undivided = self.score(Scored {
            z,
            bias: &bias,
            sigma: &self.sigma,
            cleaned: whole.as_ref().map(|c| c.0.as_slice()),
            truth: &self.truth.state,
            h_true: h,
            start: &start,
        })?;
        if let Some((_, eigen)) = whole {
            undivided.spectrum = eigen;
        }
        undivided.wall_ms = clock.elapsed().as_secs_f64() * 1e3;

        let clock = Instant::now();
        let mut cleaned = z.clone();
        let mut partition = Vec::new();
        let entries = self.est.plan().entries();
        for kinds in &self.cfg.divided.groups {
            let rows: Vec<usize> = (0..entries.len()).filter(|i| kinds.contains(&entries[*i].kind)).collect();
            if rows.is_empty() {
                continue;
            }
            let t_g = window_len(self.cfg.window_ratio, rows.len()).min(t);
            let sub_cols: Vec<Vec<f64>> = columns[t - t_g..]
                .iter()
                .map(|c| rows.iter().map(|i| c[*i]).collect())
                .collect();
            let pick = |v: &[f64]| -> Vec<f64> { rows.iter().map(|i| v[*i]).collect() };
            let sub_plan = MeasurementPlan::from_entries(rows.iter().map(|i| entries[*i]).collect());
            let sub_bias = pick(&bias);
            let result = self.clean(&sub_cols, &sub_bias, &pick(&self.sigma), model, &sub_plan)?;
            let refused = result.is_none();
            if let Some((values, _)) = &result {
                for (k, i) in rows.iter().enumerate() {
                    cleaned[*i] = values[k];
                }
            }
            let sub_h = pick(h);
            partition.push(PartitionStats {
                kinds: kinds.iter().map(|k| k.label()).collect::<Vec<_>>().join("+"),
                n_vars: rows.len(),
                n_samples: t_g,
                meas_mae_raw: mae(&pick(z), &sub_h)?,
                meas_mae_clean: mae(&pick(&cleaned), &sub_h)?,
                refused,
            });
        }
        let mut divided = self.score(Scored {
            z,
            bias: &bias,
            sigma: &self.sigma,
            cleaned: Some(&cleaned),
            truth: &self.truth.state,
            h_true: h,
            start: &start,
        })?;
        divided.partition = partition;
        divided.wall_ms = clock.elapsed().as_secs_f64() * 1e3;
        Ok(vec![undivided, divided])
    }

    /// True operating points of `n_samples` consecutive samples under the
    /// configured load profiles. Columns with unchanged loads share the
    /// previous solution; the others are re-solved from a warm start.
    pub fn column_truths(&self, n_samples: usize) -> Result<Vec<ColumnTruth>, HarnessError> {
        let profiles = &self.cfg.time_varying.profiles;
        let mut targets = Vec::with_capacity(profiles.len());
        for p in profiles {
            let idx = self
                .case
                .bus_index(p.bus)
                .ok_or_else(|| HarnessError::Config(format!("load profile names unknown bus {}", p.bus)))?;
            targets.push((idx, self.case.buses[idx].load_p, p.shape));
        }
        let mut out: Vec<ColumnTruth> = Vec::with_capacity(n_samples);
        let mut last_mult: Vec<f64> = vec![1.0; targets.len()];
        let mut case = self.case.clone();
        for k in 0..n_samples {
            let mult: Vec<f64> = targets.iter().map(|(_, _, s)| s.multiplier(k, n_samples)).collect();
            let same = if k == 0 {
                mult.iter().all(|m| *m == 1.0)
            } else {
                mult == last_mult
            };
            if same {
                let prev = out.last().unwrap_or(&self.truth).clone();
                out.push(prev);
            } else {
                for ((idx, base, _), m) in targets.iter().zip(&mult) {
                    case.buses[*idx].load_p = base * m;
                }
                let warm = out.last().unwrap_or(&self.truth).state.clone();
                let opts = PowerFlowOptions {
                    initial: Some(warm),
                    ..Default::default()
                };
                let pf = solve_power_flow_with(&case, self.est.admittance(), &opts)?;
                let measurements = self.est.measure(&pf.state);
                out.push(ColumnTruth {
                    state: pf.state,
                    measurements,
                    mismatch: pf.max_mismatch,
                });
            }
            last_mult = mult;
        }
        Ok(out)
    }

    fn time_varying_groups(&self) -> Result<Vec<GroupReport>, HarnessError> {
        let t = window_len(self.cfg.window_ratio, self.n_vars());
        let steps = self.cfg.time_varying.steps;
        let truths = self.column_truths(t + steps - 1)?;
        let worst = truths.iter().fold(0.0f64, |m, c| m.max(c.mismatch));
        let labels = (0..steps)
            .map(|s| GroupLabel::new(format!("step={s}"), Some(s as f64), t))
            .collect();
        let mut groups = self.collect(labels, |trial| match self.time_varying_trial(trial, t, &truths) {
            Ok(v) => v.into_iter().map(Ok).collect(),
            Err(e) => {
                let msg = e.to_string();
                (0..steps).map(|_| Err(HarnessError::Config(msg.clone()))).collect()
            }
        });
        for g in &mut groups {
            g.notes.push(format!("largest power-flow mismatch over the simulated samples: {worst:e}"));
        }
        Ok(groups)
    }

    fn time_varying_trial(
        &self,
        trial: usize,
        t: usize,
        truths: &[ColumnTruth],
    ) -> Result<Vec<GroupOutcome>, HarnessError> {
        let model = self.cfg.noise.model;
        let steps = truths.len() + 1 - t;
        let mut rng = trial_rng(self.cfg.seed, trial);
        let (bias, columns) = self.draw_columns(|k| &truths[k].measurements, truths.len(), model, &mut rng);
        let starts = (0..steps)
            .map(|_| self.est.initial_state(&self.cfg.wls.init, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = Vec::with_capacity(steps);
        for (s, start) in starts.iter().enumerate() {
            let clock = Instant::now();
            let window = &columns[s..s + t];
            let current = &truths[s + t - 1];
            let cleaning = self.clean(window, &bias, &self.sigma, model, self.est.plan())?;
            let mut g = self.score(Scored {
                z: window.last().expect("window has columns"),
                bias: &bias,
                sigma: &self.sigma,
                cleaned: cleaning.as_ref().map(|c| c.0.as_slice()),
                truth: &current.state,
                h_true: &current.measurements,
                start,
            })?;
            if let Some((_, eigen)) = cleaning {
                g.spectrum = eigen;
            }
            g.wall_ms = clock.elapsed().as_secs_f64() * 1e3;
            out.push(g);
        }
        Ok(out)
    }

    /// Draws the bias and `t` raw columns `truth(k) + bias + amplitude * e`.
    fn draw_columns<'a, F, R>(&self, truth: F, t: usize, model: NoiseModel, rng: &mut R) -> (Vec<f64>, Vec<Vec<f64>>)
    where
        F: Fn(usize) -> &'a [f64],
        R: Rng + ?Sized,
    {
        let n = self.n_vars();
        let bias = draw_bias(n, self.cfg.noise.bias_range, rng);
        let columns = (0..t)
            .map(|k| {
                let h = truth(k);
                (0..n)
                    .map(|i| h[i] + bias[i] + self.amplitude[i] * model.sample_standard(rng))
                    .collect()
            })
            .collect();
        (bias, columns)
    }

    /// Cleans a window of raw columns; `None` when the window is too short
    /// for the cleaner to accept it.
    fn clean(
        &self,
        columns: &[Vec<f64>],
        bias: &[f64],
        sigma: &[f64],
        model: NoiseModel,
        plan: &MeasurementPlan,
    ) -> Result<Option<CleanedSnapshot>, HarnessError> {
        let spec = NoiseSpec::new(model, sigma.to_vec(), bias.to_vec())?;
        let window = build_window(columns, &spec, plan)?;
        match clean_window(&window, &self.cfg.cleaning) {
            Ok(c) => Ok(Some((c.measurements, c.eigen))),
            Err(RmtError::TooFewSamples { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn score(&self, s: Scored<'_>) -> Result<GroupOutcome, HarnessError> {
        let wls = self.est.wls(s.z, s.sigma, &self.cfg.wls, s.start)?;
        let rwls = match s.cleaned {
            Some(c) => self.est.wls(c, s.sigma, &self.cfg.wls, s.start)?,
            None => wls.clone(),
        };
        let truth = s.truth.stacked();
        let n_bus = s.truth.n_bus();
        let (vm_t, va_t) = (s.truth.vm(), s.truth.va());
        let h_wls = self.est.measure(&wls.state);
        let h_rwls = self.est.measure(&rwls.state);
        let debiased: Vec<f64> = s.z.iter().zip(s.bias).map(|(z, b)| z - b).collect();
        let cleaned_input = s.cleaned.unwrap_or(s.z);

        let mut per_kind = Vec::new();
        for (kind, rows) in self.est.plan().groups() {
            let pick = |v: &[f64]| -> Vec<f64> { rows.iter().map(|i| v[*i]).collect() };
            let h = pick(s.h_true);
            per_kind.push(KindMae {
                kind,
                wls: mae(&pick(&h_wls), &h)?,
                rwls: mae(&pick(&h_rwls), &h)?,
            });
        }

        let d_wls = error_decomposition(s.z, s.h_true, &h_wls, &wls.weights)?;
        let d_rwls = error_decomposition(cleaned_input, s.h_true, &h_rwls, &rwls.weights)?;
        let trace = self
            .est
            .plan()
            .entries()
            .iter()
            .enumerate()
            .map(|(i, m)| ResidualRow {
                kind: m.kind,
                index: m.index,
                wls_residual: d_wls.residual[i],
                wls_estimated_error: d_wls.estimated_error[i],
                rwls_residual: d_rwls.residual[i],
                rwls_estimated_error: d_rwls.estimated_error[i],
            })
            .collect();

        debug_assert_eq!(truth.len(), 2 * n_bus);
        let metrics = TrialMetrics {
            wls_mae: mae(&wls.state.stacked(), &truth)?,
            rwls_mae: mae(&rwls.state.stacked(), &truth)?,
            wls_mae_vm: mae(wls.state.vm(), vm_t)?,
            wls_mae_va: mae(wls.state.va(), va_t)?,
            rwls_mae_vm: mae(rwls.state.vm(), vm_t)?,
            rwls_mae_va: mae(rwls.state.va(), va_t)?,
            meas_mae_raw: mae(s.z, s.h_true)?,
            meas_mae_debiased: mae(&debiased, s.h_true)?,
            meas_mae_clean: mae(cleaned_input, s.h_true)?,
            wls_iters: wls.iterations,
            rwls_iters: rwls.iterations,
            wls_converged: wls.converged,
            rwls_converged: rwls.converged,
            cleaning_refused: s.cleaned.is_none(),
            per_kind,
        };
        Ok(GroupOutcome {
            metrics,
            spectrum: Vec::new(),
            trace,
            partition: Vec::new(),
            wall_ms: 0.0,
        })
    }

    /// Runs every trial (concurrently) and folds the per-group outcomes into
    /// reports. `trial_fn` returns one entry per label, in label order.
    fn collect<F>(&self, labels: Vec<GroupLabel>, trial_fn: F) -> Vec<GroupReport>
    where
        F: Fn(usize) -> Vec<Result<GroupOutcome, HarnessError>> + Sync,
    {
        let per_trial: Vec<Vec<Result<GroupOutcome, HarnessError>>> =
            (0..self.cfg.trials).into_par_iter().map(&trial_fn).collect();
        let n = self.n_vars();
        let mut groups: Vec<GroupReport> = labels
            .into_iter()
            .map(|l| GroupReport {
                label: l.label,
                parameter: l.parameter,
                n_vars: n,
                n_samples: l.n_samples,
                trials: Vec::with_capacity(self.cfg.trials),
                aggregate: None,
                degraded: false,
                notes: Vec::new(),
                spectrum: Vec::new(),
                trace: Vec::new(),
                partition: Vec::new(),
            })
            .collect();
        for (trial, outcomes) in per_trial.into_iter().enumerate() {
            assert_eq!(outcomes.len(), groups.len(), "one outcome per group");
            for (g, outcome) in groups.iter_mut().zip(outcomes) {
                let record = match outcome {
                    Ok(o) => {
                        if g.spectrum.is_empty() && g.trace.is_empty() {
                            g.spectrum = o.spectrum;
                            g.trace = o.trace;
                            g.partition = o.partition;
                        }
                        TrialResult {
                            trial,
                            seed: self.cfg.seed,
                            wall_ms: o.wall_ms,
                            metrics: Some(o.metrics),
                            error: None,
                        }
                    }
                    Err(e) => {
                        log::warn!("trial {trial} of group {} failed: {e}", g.label);
                        TrialResult {
                            trial,
                            seed: self.cfg.seed,
                            wall_ms: 0.0,
                            metrics: None,
                            error: Some(e.to_string()),
                        }
                    }
                };
                g.trials.push(record);
            }
        }
        for g in &mut groups {
            g.aggregate = Aggregate::from_trials(&g.trials);
        }
        groups
    }
}

struct GroupLabel {
    label: String,
    parameter: Option<f64>,
    n_samples: usize,
}

impl GroupLabel {
    fn new(label: impl Into<String>, parameter: Option<f64>, n_samples: usize) -> Self {
        Self {
            label: label.into(),
            parameter,
            n_samples,
        }
    }
}

/// Per-variable noise levels `(sigma, amplitude)`: power rows use `flow_pct`,
/// voltage rows `vm_pct`. A zero level leaves the row noiseless while its
/// weight still uses the floored sigma.
fn noise_levels(noise: &NoiseConfig, plan: &MeasurementPlan, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let level = |kind: MeasurementKind| if kind.is_voltage() { noise.vm_pct } else { noise.flow_pct };
    let mut sigma = Vec::with_capacity(h.len());
    let mut amplitude = Vec::with_capacity(h.len());
    for (m, hv) in plan.entries().iter().zip(h) {
        let pct = level(m.kind);
        let s = sigma_from_truth(&[*hv], pct, noise.sigma_mode, noise.sigma_floor)[0];
        sigma.push(s);
        amplitude.push(if pct == 0.0 { 0.0 } else { s });
    }
    (sigma, amplitude)
}

#[cfg(test)]
mod tests;
