use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, ControlError, Result};
use crate::linalg::clip_norm;

#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceKind {
    Zero,
    Constant(DVector<f64>),
    /// i.i.d. `N(0, σ²I)` per step, radially clipped to `W`.
    GaussianClipped { sigma: f64 },
    /// Each coordinate uniform on `[−half_width, half_width]`, then clipped.
    Uniform { half_width: f64 },
    /// Coordinate `k` is `amplitude · sin(2π t / period + 2π k / d)`.
    Sinusoidal { amplitude: f64, period: f64 },
    /// `(−1)^t · amplitude · e₁`.
    SignAlternating { amplitude: f64 },
    /// Row `t` of a recorded stream.
    Replay(Vec<DVector<f64>>),
}

/// Deterministic adversary: `emit(t)` depends only on `(kind, seed, t)`.
///
/// Random kinds draw from a ChaCha stream keyed by `t`, so steps can be
/// produced in any order and two generators with equal seeds agree bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceGenerator {
    kind: DisturbanceKind,
    dim: usize,
    w_bound: f64,
    seed: u64,
}

impl DisturbanceGenerator {
    pub fn new(kind: DisturbanceKind, dim: usize, w_bound: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(ControlError::InvalidParameter {
                name: "dim",
                reason: "must be at least 1".into(),
            });
        }
        if !(w_bound > 0.0) {
            return Err(ControlError::InvalidParameter {
                name: "W",
                reason: format!("must be positive, got {w_bound}"),
            });
        }
        match &kind {
            DisturbanceKind::Constant(v) => check_dim("constant disturbance", dim, v.len())?,
            DisturbanceKind::Replay(rows) => {
                for row in rows {
                    check_dim("replay row", dim, row.len())?;
                }
            }
            DisturbanceKind::Sinusoidal { period, .. } if !(*period > 0.0) => {
                return Err(ControlError::InvalidParameter {
                    name: "period",
                    reason: "must be positive".into(),
                })
            }
            _ => {}
        }
        Ok(Self {
            kind,
            dim,
            w_bound,
            seed,
        })
    }

    pub fn kind(&self) -> &DisturbanceKind {
        &self.kind
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn w_bound(&self) -> f64 {
        self.w_bound
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    fn rng_at(&self, t: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(t as u64);
        rng
    }

    pub fn emit(&self, t: usize) -> Result<DVector<f64>> {
        let d = self.dim;
        let mut w = match &self.kind {
            DisturbanceKind::Zero => DVector::zeros(d),
            DisturbanceKind::Constant(v) => v.clone(),
            DisturbanceKind::GaussianClipped { sigma } => {
                let mut rng = self.rng_at(t);
                DVector::from_fn(d, |_, _| sigma * rng.sample::<f64, _>(StandardNormal))
            }
            DisturbanceKind::Uniform { half_width } => {
                let mut rng = self.rng_at(t);
                DVector::from_fn(d, |_, _| half_width * (2.0 * rng.random::<f64>() - 1.0))
            }
            DisturbanceKind::Sinusoidal { amplitude, period } => DVector::from_fn(d, |k, _| {
                amplitude * (2.0 * PI * t as f64 / period + 2.0 * PI * k as f64 / d as f64).sin()
            }),
            DisturbanceKind::SignAlternating { amplitude } => {
                let mut v = DVector::zeros(d);
                v[0] = if t.is_multiple_of(2) { *amplitude } else { -amplitude };
                v
            }
            DisturbanceKind::Replay(rows) => rows
                .get(t)
                .cloned()
                .ok_or(ControlError::ReplayExhausted { t, len: rows.len() })?,
        };
        clip_norm(&mut w, self.w_bound);
        Ok(w)
    }

    /// `w_0 … w_{horizon-1}`.
    pub fn stream(&self, horizon: usize) -> Result<Vec<DVector<f64>>> {
        (0..horizon).map(|t| self.emit(t)).collect()
    }
}

/// Reads a replay stream: header `w0,…,w{d-1}`, one row per step.
pub fn read_replay_csv(path: impl AsRef<Path>) -> Result<Vec<DVector<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    for (k, h) in headers.iter().enumerate() {
        if h.trim() != format!("w{k}") {
            return Err(ControlError::Csv(format!(
                "header column {k} should be `w{k}`, found `{h}`"
            )));
        }
    }
    let d = headers.len();
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != d {
            return Err(ControlError::Csv(format!("row {line} has {} fields, expected {d}", rec.len())));
        }
        let vals = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| ControlError::Csv(format!("row {line}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(DVector::from_vec(vals));
    }
    Ok(rows)
}

pub fn write_replay_csv(path: impl AsRef<Path>, rows: &[DVector<f64>]) -> Result<()> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut out = String::new();
    out.push_str(&(0..d).map(|k| format!("w{k}")).collect::<Vec<_>>().join(","));
    out.push('\n');
    for r in rows {
        out.push_str(&r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
