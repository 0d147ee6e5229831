//! Small dense helpers shared by the rest of the crate.
//!
//! Everything here works on `nalgebra` dynamic matrices; the systems we handle
//! have a few dozen states at most so nothing is blocked or sparse.

use nalgebra::{DMatrix, DVector};

/// Iteration budget for [`spectral_norm`].
pub const POWER_ITERATIONS: usize = 50;
/// Relative convergence tolerance for [`spectral_norm`].
pub const POWER_TOLERANCE: f64 = 1e-10;
const GRAM_SQUARINGS: usize = 4;

/// Largest singular value of `m`, estimated by power iteration on a power of `mᵀm`.
///
/// Three deterministic starting vectors are tried and the larger Rayleigh
/// quotient is kept, so a start orthogonal to the top singular vector cannot
/// silently collapse the estimate.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return 0.0;
    }
    if n == 1 || m.nrows() == 1 {
        return m.norm();
    }
    let gram = squared_gram(m);
    let starts = [
        DVector::from_fn(n, |i, _| 1.0 + 0.37 * i as f64),
        DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -0.61 }),
        DVector::from_fn(n, |i, _| ((i as f64 + 1.0) * 0.754_877_666_2).fract() - 0.5),
    ];
    starts
        .into_iter()
        .map(|v| power_sigma(m, &gram, v))
        .fold(0.0, f64::max)
}

fn power_sigma(m: &DMatrix<f64>, gram: &DMatrix<f64>, mut v: DVector<f64>) -> f64 {
    let norm = v.norm();
    v /= norm;
    let mut prev = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let next = gram * &v;
        let nn = next.norm();
        if nn == 0.0 {
            break;
        }
        v = next / nn;
        let est = (m * &v).norm_squared();
        if (est - prev).abs() <= POWER_TOLERANCE * est.max(f64::MIN_POSITIVE) {
            break;
        }
        prev = est;
    }
    // Rayleigh quotient of a unit vector never exceeds the true value.
    (m * &v).norm()
}

/// `(mᵀm)^(2^GRAM_SQUARINGS)`, rescaled after every squaring. Iterating on it
/// instead of `mᵀm` makes each power step worth `2^GRAM_SQUARINGS` plain ones,
/// which matters when the top two singular values are close.
fn squared_gram(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = m.tr_mul(m);
    for _ in 0..GRAM_SQUARINGS {
        let s = g.amax();
        if s == 0.0 {
            break;
        }
        g /= s;
        g = &g * &g;
    }
    g
}

/// `[m⁰, m¹, …, m^max_pow]`.
pub fn matrix_powers(m: &DMatrix<f64>, max_pow: usize) -> Vec<DMatrix<f64>> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(max_pow + 1);
    out.push(DMatrix::identity(n, n));
    for j in 1..=max_pow {
        let next = &out[j - 1] * m;
        out.push(next);
    }
    out
}

/// Radial projection onto the Euclidean ball of radius `radius`.
///
/// The result satisfies `‖v‖ ≤ radius` exactly in floating point.
pub fn clip_norm(v: &mut DVector<f64>, radius: f64) {
    let n = v.norm();
    if n > radius {
        *v *= radius / n;
        while v.norm() > radius {
            *v *= 1.0 - f64::EPSILON;
        }
    }
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= tol * scale
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone().symmetric_eigen().eigenvalues.min()
}

/// Build a matrix from row-major nested rows. Returns `None` for ragged input.
pub fn from_rows(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
