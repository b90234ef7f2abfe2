use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{inc_rat, ExperimentConfig, HarnessError, Scenario};
use crate::powerflow::MeasurementKind;
use crate::rmt::CleanedEigenvalue;

/// Estimated-measurement MAE for one measurement kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindMae {
    pub kind: MeasurementKind,
    pub wls: f64,
    pub rwls: f64,
}

/// Numbers from one successful trial. State MAEs are over the stacked
/// `[vm; va]` vector, with the magnitude and angle parts also given apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub wls_mae: f64,
    pub rwls_mae: f64,
    pub wls_mae_vm: f64,
    pub wls_mae_va: f64,
    pub rwls_mae_vm: f64,
    pub rwls_mae_va: f64,
    /// Current raw snapshot against the truth.
    pub meas_mae_raw: f64,
    /// Raw snapshot with the known bias subtracted.
    pub meas_mae_debiased: f64,
    /// Input of the second stage (cleaned snapshot, or raw after a refusal).
    pub meas_mae_clean: f64,
    pub wls_iters: usize,
    pub rwls_iters: usize,
    pub wls_converged: bool,
    pub rwls_converged: bool,
    pub cleaning_refused: bool,
    pub per_kind: Vec<KindMae>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    /// Master seed; the trial's generator is this seed on stream `trial`.
    pub seed: u64,
    pub wall_ms: f64,
    pub metrics: Option<TrialMetrics>,
    pub error: Option<String>,
}

/// Arithmetic means over the successful trials of a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_ok: usize,
    pub n_failed: usize,
    pub wls_mae: f64,
    pub rwls_mae: f64,
    pub inc_rat: f64,
    pub wls_mae_vm: f64,
    pub wls_mae_va: f64,
    pub rwls_mae_vm: f64,
    pub rwls_mae_va: f64,
    pub meas_mae_raw: f64,
    pub meas_mae_debiased: f64,
    pub meas_mae_clean: f64,
    pub wls_iters: f64,
    pub rwls_iters: f64,
    pub per_kind: Vec<KindMae>,
}

impl Aggregate {
    /// `None` when no trial succeeded.
    pub fn from_trials(trials: &[TrialResult]) -> Option<Self> {
        let ok: Vec<&TrialMetrics> = trials.iter().filter_map(|t| t.metrics.as_ref()).collect();
        if ok.is_empty() {
            return None;
        }
        let n = ok.len() as f64;
        let mean = |f: &dyn Fn(&TrialMetrics) -> f64| ok.iter().map(|m| f(m)).sum::<f64>() / n;
        let per_kind = ok[0]
            .per_kind
            .iter()
            .enumerate()
            .map(|(i, k)| KindMae {
                kind: k.kind,
                wls: mean(&|m| m.per_kind[i].wls),
                rwls: mean(&|m| m.per_kind[i].rwls),
            })
            .collect();
        let wls_mae = mean(&|m| m.wls_mae);
        let rwls_mae = mean(&|m| m.rwls_mae);
        Some(Self {
            n_ok: ok.len(),
            n_failed: trials.len() - ok.len(),
            wls_mae,
            rwls_mae,
            inc_rat: inc_rat(wls_mae, rwls_mae),
            wls_mae_vm: mean(&|m| m.wls_mae_vm),
            wls_mae_va: mean(&|m| m.wls_mae_va),
            rwls_mae_vm: mean(&|m| m.rwls_mae_vm),
            rwls_mae_va: mean(&|m| m.rwls_mae_va),
            meas_mae_raw: mean(&|m| m.meas_mae_raw),
            meas_mae_debiased: mean(&|m| m.meas_mae_debiased),
            meas_mae_clean: mean(&|m| m.meas_mae_clean),
            wls_iters: mean(&|m| m.wls_iters as f64),
            rwls_iters: mean(&|m| m.rwls_iters as f64),
            per_kind,
        })
    }
}

/// Residual and estimated-measurement error of one variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub kind: MeasurementKind,
    pub index: usize,
    pub wls_residual: f64,
    pub wls_estimated_error: f64,
    pub rwls_residual: f64,
    pub rwls_estimated_error: f64,
}

/// Size and measurement MAE of one independently cleaned block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub kinds: String,
    pub n_vars: usize,
    pub n_samples: usize,
    pub meas_mae_raw: f64,
    pub meas_mae_clean: f64,
    pub refused: bool,
}

/// One point of a scenario (a ratio, a noise model, a time step...).
/// `spectrum`, `trace` and `partition` come from the first successful trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub label: String,
    pub parameter: Option<f64>,
    pub n_vars: usize,
    pub n_samples: usize,
    pub trials: Vec<TrialResult>,
    pub aggregate: Option<Aggregate>,
    pub degraded: bool,
    pub notes: Vec<String>,
    pub spectrum: Vec<CleanedEigenvalue>,
    pub trace: Vec<ResidualRow>,
    pub partition: Vec<PartitionStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub case_hash: String,
    pub plan_hash: String,
    pub n_bus: usize,
    pub n_vars: usize,
    pub groups: Vec<GroupReport>,
    pub wall_ms: f64,
}

impl ExperimentReport {
    pub fn group(&self, label: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.label == label)
    }

    /// Copy with every wall-clock field zeroed, for comparing runs.
    pub fn without_timings(&self) -> Self {
        let mut out = self.clone();
        out.wall_ms = 0.0;
        for g in &mut out.groups {
            for t in &mut g.trials {
                t.wall_ms = 0.0;
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("report: {e}")))
    }

    /// Per-trial table. Every scenario except the baseline adds a leading
    /// `group` column.
    pub fn trials_csv(&self) -> String {
        let grouped = self.config.scenario != Scenario::Baseline;
        let mut out = String::new();
        if grouped {
            out.push_str("group,");
        }
        out.push_str("trial,seed,wls_mae,rwls_mae,meas_mae_raw,meas_mae_clean,iters,wall_ms\n");
        for g in &self.groups {
            for t in &g.trials {
                if grouped {
                    let _ = write!(out, "{},", g.label);
                }
                let _ = write!(out, "{},{},", t.trial, t.seed);
                match &t.metrics {
                    Some(m) => {
                        let _ = write!(
                            out,
                            "{},{},{},{},{},",
                            num(m.wls_mae),
                            num(m.rwls_mae),
                            num(m.meas_mae_raw),
                            num(m.meas_mae_clean),
                            m.rwls_iters
                        );
                    }
                    None => out.push_str(",,,,,"),
                }
                let _ = writeln!(out, "{}", num(t.wall_ms));
            }
        }
        out
    }

    /// One row per group: the sweep curve.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "group,parameter,n_vars,n_samples,n_ok,n_failed,wls_mae,rwls_mae,inc_rat,meas_mae_raw,meas_mae_debiased,meas_mae_clean,degraded\n",
        );
        for g in &self.groups {
            let param = g.parameter.map(num).unwrap_or_default();
            let _ = write!(out, "{},{},{},{},", g.label, param, g.n_vars, g.n_samples);
            match &g.aggregate {
                Some(a) => {
                    let _ = write!(
                        out,
                        "{},{},{},{},{},{},{},{},",
                        a.n_ok,
                        a.n_failed,
                        num(a.wls_mae),
                        num(a.rwls_mae),
                        num(a.inc_rat),
                        num(a.meas_mae_raw),
                        num(a.meas_mae_debiased),
                        num(a.meas_mae_clean)
                    );
                }
                None => {
                    let _ = write!(out, "0,{},,,,,,,", g.trials.len());
                }
            }
            let _ = writeln!(out, "{}", g.degraded);
        }
        out
    }

    /// Mean estimated-measurement MAE per kind and group.
    pub fn per_kind_csv(&self) -> String {
        let mut out = String::from("group,kind,wls_mae,rwls_mae\n");
        for g in &self.groups {
            if let Some(a) = &g.aggregate {
                for k in &a.per_kind {
                    let _ = writeln!(out, "{},{},{},{}", g.label, k.kind.label(), num(k.wls), num(k.rwls));
                }
            }
        }
        out
    }

    pub fn spectrum_csv(&self) -> String {
        let mut out = String::from("group,lambda,h,rho,xi\n");
        for g in &self.groups {
            for e in &g.spectrum {
                let _ = writeln!(out, "{},{},{},{},{}", g.label, num(e.lambda), num(e.h), num(e.rho), num(e.xi));
            }
        }
        out
    }

    pub fn residuals_csv(&self) -> String {
        let mut out = String::from(
            "group,kind,index,wls_residual,wls_estimated_error,rwls_residual,rwls_estimated_error\n",
        );
        for g in &self.groups {
            for r in &g.trace {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    g.label,
                    r.kind.label(),
                    r.index,
                    num(r.wls_residual),
                    num(r.wls_estimated_error),
                    num(r.rwls_residual),
                    num(r.rwls_estimated_error)
                );
            }
        }
        out
    }

    pub fn partition_csv(&self) -> String {
        let mut out = String::from("group,kinds,n_vars,n_samples,meas_mae_raw,meas_mae_clean,refused\n");
        for g in &self.groups {
            for p in &g.partition {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    g.label,
                    p.kinds,
                    p.n_vars,
                    p.n_samples,
                    num(p.meas_mae_raw),
                    num(p.meas_mae_clean),
                    p.refused
                );
            }
        }
        out
    }
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    Csv,
    Json,
    #[default]
    Both,
}

impl FromStr for ReportFormat {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "both" => Ok(ReportFormat::Both),
            other => Err(HarnessError::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Writes the report into `dir` and returns the files written.
///
/// JSON goes to `report.json`; CSV output is `trials.csv`, `summary.csv`,
/// `per_kind.csv`, `spectrum.csv`, `residuals.csv` and, for the divided
/// scenario, `partition.csv`. Each file is replaced atomically.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut files: Vec<(&str, String)> = Vec::new();
    if matches!(format, ReportFormat::Json | ReportFormat::Both) {
        files.push(("report.json", report.to_json()));
    }
    if matches!(format, ReportFormat::Csv | ReportFormat::Both) {
        files.push(("trials.csv", report.trials_csv()));
        files.push(("summary.csv", report.summary_csv()));
        files.push(("per_kind.csv", report.per_kind_csv()));
        files.push(("spectrum.csv", report.spectrum_csv()));
        files.push(("residuals.csv", report.residuals_csv()));
        if report.config.scenario == Scenario::Divided {
            files.push(("partition.csv", report.partition_csv()));
        }
    }
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(name);
        crate::util::write_atomic(&path, body.as_bytes()).map_err(|e| HarnessError::Io {
            path: path.clone(),
            message: e.to_string(),
        })?;
        written.push(path);
    }
    Ok(written)
}
