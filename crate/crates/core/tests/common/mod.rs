//! Independent reference computations shared by the integration tests and the
//! acceptance runner. Nothing here goes through the library's transfer-matrix
//! or Jacobian code: states come from stepping the recursion by hand.

#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use online_control::lds::LdsSystem;
use online_control::policy::{DisturbancePolicy, StabilizingController};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn specs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("specs")
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// Largest singular value via the full SVD; the tests' reference norm.
pub fn svd_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

pub fn with_norm(m: DMatrix<f64>, target: f64) -> DMatrix<f64> {
    let n = svd_norm(&m);
    if n == 0.0 {
        m
    } else {
        m * (target / n)
    }
}

pub fn power(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut p = DMatrix::identity(m.nrows(), m.ncols());
    for _ in 0..k {
        p = &p * m;
    }
    p
}

/// A random plant with a stabilizing gain built as `A = BK + L`, `‖L‖ ≤ 1 − γ`.
pub struct Instance {
    pub system: LdsSystem,
    pub controller: StabilizingController,
    pub dx: usize,
    pub du: usize,
}

pub fn random_instance(rng: &mut ChaCha8Rng, max_dim: usize) -> Instance {
    let dx = rng.random_range(1..=max_dim);
    let du = rng.random_range(1..=max_dim);
    let gamma = rng.random_range(0.2..0.8);
    let b = uniform_matrix(rng, dx, du);
    let k = uniform_matrix(rng, du, dx) * 0.5;
    let l = with_norm(uniform_matrix(rng, dx, dx), (1.0 - gamma) * rng.random_range(0.5..1.0));
    let a = &b * &k + l;
    let system = LdsSystem::with_tight_bounds(a, b, 1.0).expect("valid plant");
    let kappa = svd_norm(&k).max(1.0) * 1.000001;
    let controller = StabilizingController::new(k, kappa, gamma).expect("valid gain");
    Instance {
        system,
        controller,
        dx,
        du,
    }
}

/// A random feasible policy: each block scaled to a random fraction of its radius.
pub fn random_policy(rng: &mut ChaCha8Rng, du: usize, dx: usize, radii: &[f64]) -> DisturbancePolicy {
    let blocks = radii
        .iter()
        .map(|&r| {
            let f = rng.random::<f64>();
            with_norm(uniform_matrix(rng, du, dx), r * f)
        })
        .collect();
    DisturbancePolicy::new(blocks, radii.to_vec()).unwrap()
}

fn w_at(ws: &[DVector<f64>], s: i64, dx: usize) -> DVector<f64> {
    if s < 0 {
        DVector::zeros(dx)
    } else {
        ws[s as usize].clone()
    }
}

/// `u = −Kx + Σ_i M^[i] w_{s−i}` computed directly.
pub fn action(
    k: &DMatrix<f64>,
    blocks: &[DMatrix<f64>],
    x: &DVector<f64>,
    ws: &[DVector<f64>],
    s: i64,
) -> DVector<f64> {
    let mut u = -(k * x);
    for (i, m) in blocks.iter().enumerate() {
        u += m * w_at(ws, s - 1 - i as i64, x.len());
    }
    u
}

/// States `x_0 = 0, x_1, …, x_T` when policy `policies[t]` is played at `t`.
pub fn rollout(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    policies: &[Vec<DMatrix<f64>>],
    ws: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let mut x = DVector::zeros(a.nrows());
    let mut out = vec![x.clone()];
    for (t, w) in ws.iter().enumerate() {
        let u = action(k, &policies[t], &x, ws, t as i64);
        x = a * &x + b * u + w;
        out.push(x.clone());
    }
    out
}

/// Ideal state and action at time `t` for a fixed policy: start from zero at
/// `t − 1 − H`, step `H + 1` times with the same policy, then act.
pub fn ideal_pair(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    blocks: &[DMatrix<f64>],
    ws: &[DVector<f64>],
    t: usize,
) -> (DVector<f64>, DVector<f64>) {
    let h = blocks.len() as i64;
    let mut x = DVector::zeros(a.nrows());
    for s in (t as i64 - 1 - h)..(t as i64) {
        let u = action(k, blocks, &x, ws, s);
        x = a * &x + b * u + w_at(ws, s, a.nrows());
    }
    let v = action(k, blocks, &x, ws, t as i64);
    (x, v)
}

/// `xᵀQx + uᵀRu`.
pub fn quad(q: &DMatrix<f64>, r: &DMatrix<f64>, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    x.dot(&(q * x)) + u.dot(&(r * u))
}

/// Slope of the least-squares line through `(x, y)`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
