use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{denormalize, normalize, NoiseError, NoiseSpec};
use crate::powerflow::MeasurementPlan;

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("sample {column} has {found} entries, expected {expected}")]
    Ragged {
        column: usize,
        found: usize,
        expected: usize,
    },
    #[error("a window needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Sidecar metadata written next to an exported window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMeta {
    pub n_vars: usize,
    pub n_samples: usize,
    pub sigma: Vec<f64>,
    pub bias: Vec<f64>,
    pub plan_hash: String,
    pub seed: Option<u64>,
}

/// Normalized measurements, one row per measured variable and one column per
/// sample; the last column is the current snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementWindow {
    meta: WindowMeta,
    /// Column-major, `n_vars * n_samples`.
    data: Vec<f64>,
}

/// Normalizes `histories` (oldest first, raw units) into a window.
pub fn build_window(
    histories: &[Vec<f64>],
    spec: &NoiseSpec,
    plan: &MeasurementPlan,
) -> Result<MeasurementWindow, WindowError> {
    if histories.len() < 2 {
        return Err(WindowError::TooFewSamples(histories.len()));
    }
    let n = plan.len();
    if spec.len() != n {
        return Err(NoiseError::Length {
            what: "noise spec",
            found: spec.len(),
            expected: n,
        }
        .into());
    }
    let mut data = Vec::with_capacity(n * histories.len());
    for (column, h) in histories.iter().enumerate() {
        if h.len() != n {
            return Err(WindowError::Ragged {
                column,
                found: h.len(),
                expected: n,
            });
        }
        data.extend(normalize(h, spec.bias(), spec.sigma())?);
    }
    Ok(MeasurementWindow {
        meta: WindowMeta {
            n_vars: n,
            n_samples: histories.len(),
            sigma: spec.sigma().to_vec(),
            bias: spec.bias().to_vec(),
            plan_hash: plan.content_hash(),
            seed: None,
        },
        data,
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl MeasurementWindow {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.meta.seed = Some(seed);
        self
    }

    pub fn meta(&self) -> &WindowMeta {
        &self.meta
    }

    pub fn n_vars(&self) -> usize {
        self.meta.n_vars
    }

    pub fn n_samples(&self) -> usize {
        self.meta.n_samples
    }

    /// Samples per variable, `T / N`.
    pub fn ratio(&self) -> f64 {
        self.n_samples() as f64 / self.n_vars() as f64
    }

    pub fn sigma(&self) -> &[f64] {
        &self.meta.sigma
    }

    pub fn bias(&self) -> &[f64] {
        &self.meta.bias
    }

    pub fn column(&self, k: usize) -> &[f64] {
        let n = self.n_vars();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn last_column(&self) -> &[f64] {
        self.column(self.n_samples() - 1)
    }

    pub fn get(&self, var: usize, sample: usize) -> f64 {
        self.data[sample * self.n_vars() + var]
    }

    /// Column-major normalized values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Column `k` back in raw units.
    pub fn raw_column(&self, k: usize) -> Vec<f64> {
        denormalize(self.column(k), self.bias(), self.sigma()).expect("window metadata is consistent")
    }

    /// One line per variable, comma-separated samples, oldest first.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.data.len() * 22);
        for i in 0..self.n_vars() {
            for k in 0..self.n_samples() {
                if k > 0 {
                    out.push(',');
                }
                out.push_str(&self.get(i, k).to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Writes the CSV matrix to `path` and the metadata to the same path with
    /// a `.json` extension.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), WindowError> {
        let path = path.as_ref();
        let write = |p: &Path, bytes: &[u8]| {
            crate::util::write_atomic(p, bytes).map_err(|source| WindowError::Io {
                path: p.to_path_buf(),
                source,
            })
        };
        write(path, self.to_csv().as_bytes())?;
        let json = serde_json::to_string_pretty(&self.meta).expect("metadata serializes");
        write(&sidecar_path(path), json.as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, WindowError> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|source| WindowError::Io {
                path: p.to_path_buf(),
                source,
            })
        };
        let format = |p: &Path, message: String| WindowError::Format {
            path: p.to_path_buf(),
            message,
        };
        let meta: WindowMeta =
            serde_json::from_str(&read(&side)?).map_err(|e| format(&side, e.to_string()))?;
        if meta.sigma.len() != meta.n_vars || meta.bias.len() != meta.n_vars {
            return Err(format(&side, "sigma/bias length differs from n_vars".into()));
        }
        let text = read(path)?;
        let mut data = vec![0.0; meta.n_vars * meta.n_samples];
        let mut rows = 0;
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            if i >= meta.n_vars {
                return Err(format(path, format!("more than {} rows", meta.n_vars)));
            }
            let mut count = 0;
            for (k, tok) in line.split(',').enumerate() {
                if k >= meta.n_samples {
                    return Err(format(path, format!("row {} has more than {} columns", i + 1, meta.n_samples)));
                }
                data[k * meta.n_vars + i] = tok
                    .trim()
                    .parse()
                    .map_err(|_| format(path, format!("row {}: bad number {tok:?}", i + 1)))?;
                count += 1;
            }
            if count != meta.n_samples {
                return Err(format(path, format!("row {} has {count} columns", i + 1)));
            }
            rows += 1;
        }
        if rows != meta.n_vars {
            return Err(format(path, format!("{rows} rows, expected {}", meta.n_vars)));
        }
        Ok(Self { meta, data })
    }
}
