use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, ControlError, Result};
use crate::linalg::{is_symmetric, min_eigenvalue, spectral_norm};

/// A convex per-step cost `c_t(x, u)` with its gradients.
///
/// `grad_bound` is the constant `G` with `‖∇_x c‖, ‖∇_u c‖ ≤ G·D` whenever
/// `‖x‖, ‖u‖ ≤ D`, and `value_bound` is `β` with `|c| ≤ β·D²` there.
pub trait Cost: Send + Sync {
    fn eval(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn grad_x(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn grad_u(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn grad_bound(&self) -> f64;
    fn value_bound(&self) -> f64;

    /// Exposes the quadratic structure when there is one, which lets offline
    /// solvers accumulate a single quadratic form instead of re-walking time.
    fn as_quadratic(&self) -> Option<&QuadraticCost> {
        None
    }
}

/// `xᵀQx + uᵀRu + qᵀx + rᵀu + c₀`, time invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_lin: DVector<f64>,
    pub r_lin: DVector<f64>,
    pub offset: f64,
    grad_bound: f64,
    value_bound: f64,
}

impl QuadraticCost {
    /// General form. `grad_bound`/`value_bound` are supplied by the caller
    /// because linear terms break the homogeneous `D`-scaling.
    pub fn with_linear_terms(
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        q_lin: DVector<f64>,
        r_lin: DVector<f64>,
        offset: f64,
        grad_bound: f64,
        value_bound: f64,
    ) -> Result<Self> {
        validate_psd("Q", &q)?;
        validate_psd("R", &r)?;
        check_dim("linear state term", q.nrows(), q_lin.len())?;
        check_dim("linear action term", r.nrows(), r_lin.len())?;
        Ok(Self {
            q,
            r,
            q_lin,
            r_lin,
            offset,
            grad_bound,
            value_bound,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.q.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.r.nrows()
    }
}

fn validate_psd(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    if !is_symmetric(m, 1e-12) {
        return Err(ControlError::InvalidParameter {
            name,
            reason: "must be symmetric".into(),
        });
    }
    let lo = min_eigenvalue(m);
    if lo < -1e-10 * m.amax().max(1.0) {
        return Err(ControlError::InvalidParameter {
            name,
            reason: format!("must be positive semidefinite (min eigenvalue {lo})"),
        });
    }
    Ok(())
}

/// `c(x, u) = xᵀQx + uᵀRu`.
pub fn make_quadratic_cost(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<QuadraticCost> {
    validate_psd("Q", &q)?;
    validate_psd("R", &r)?;
    let nq = spectral_norm(&q);
    let nr = spectral_norm(&r);
    let (dx, du) = (q.nrows(), r.nrows());
    QuadraticCost::with_linear_terms(
        q,
        r,
        DVector::zeros(dx),
        DVector::zeros(du),
        0.0,
        2.0 * nq.max(nr),
        nq + nr,
    )
}

/// One-dimensional `(δx − 1)²` with `δ = 1/√T`; the action is ignored.
///
/// The bounds hold for `D ≥ 1`, which covers the `[−1, 1]` domain this cost
/// is played on.
pub fn make_counterexample_cost(horizon: usize, input_dim: usize) -> Result<QuadraticCost> {
    if horizon == 0 {
        return Err(ControlError::InvalidParameter {
            name: "T",
            reason: "must be at least 1".into(),
        });
    }
    let delta = 1.0 / (horizon as f64).sqrt();
    QuadraticCost::with_linear_terms(
        DMatrix::from_element(1, 1, delta * delta),
        DMatrix::zeros(input_dim, input_dim),
        DVector::from_element(1, -2.0 * delta),
        DVector::zeros(input_dim),
        1.0,
        2.0 * delta * (delta + 1.0),
        (delta + 1.0).powi(2),
    )
}

impl Cost for QuadraticCost {
    fn eval(&self, _t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let qx = &self.q * x;
        let ru = &self.r * u;
        x.dot(&qx) + u.dot(&ru) + self.q_lin.dot(x) + self.r_lin.dot(u) + self.offset
    }

    fn grad_x(&self, _t: usize, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        let mut g = self.q_lin.clone();
        g.gemv(2.0, &self.q, x, 1.0);
        g
    }

    fn grad_u(&self, _t: usize, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut g = self.r_lin.clone();
        g.gemv(2.0, &self.r, u, 1.0);
        g
    }

    fn grad_bound(&self) -> f64 {
        self.grad_bound
    }

    fn value_bound(&self) -> f64 {
        self.value_bound
    }

    fn as_quadratic(&self) -> Option<&QuadraticCost> {
        Some(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use proptest::prelude::*;

    #[test]
    fn identity_weights() {
        let c = make_quadratic_cost(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(c.eval(0, &dvector![1.0, 0.0], &dvector![1.0, 1.0]), 3.0);
        assert_eq!(
            c.grad_x(0, &dvector![1.0, 2.0], &dvector![0.0, 0.0]),
            dvector![2.0, 4.0]
        );
    }

    #[test]
    fn zero_weights_are_zero_everywhere() {
        let c = make_quadratic_cost(DMatrix::zeros(2, 2), DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(c.eval(3, &dvector![5.0, -2.0], &dvector![7.0]), 0.0);
    }

    #[test]
    fn rejects_non_symmetric_and_indefinite() {
        let ns = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(make_quadratic_cost(ns, DMatrix::identity(1, 1)).is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(make_quadratic_cost(indef, DMatrix::identity(1, 1)).is_err());
    }

    #[test]
    fn counterexample_values() {
        let one = make_counterexample_cost(1, 1).unwrap();
        assert_eq!(one.eval(0, &dvector![1.0], &dvector![0.0]), 0.0);
        let four = make_counterexample_cost(4, 1).unwrap();
        assert_eq!(four.eval(0, &dvector![1.0], &dvector![3.0]), 0.25);
        for t in [1, 9, 1000] {
            let c = make_counterexample_cost(t, 1).unwrap();
            assert_eq!(c.eval(0, &dvector![0.0], &dvector![0.0]), 1.0);
        }
        // derivative 2δ(δx − 1) at T = 4, x = 1
        assert!((four.grad_x(0, &dvector![1.0], &dvector![0.0])[0] - (-0.5)).abs() < 1e-15);
        assert!(make_counterexample_cost(0, 1).is_err());
    }

    fn psd(entries: &[f64], n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_row_slice(n, n, entries);
        m.transpose() * m
    }

    proptest! {
        #[test]
        fn quadratic_bounds_hold(
            qe in proptest::collection::vec(-1.0f64..1.0, 4),
            re in proptest::collection::vec(-1.0f64..1.0, 1),
            xs in proptest::collection::vec(-1.0f64..1.0, 2),
            us in -1.0f64..1.0,
            d in 0.1f64..10.0,
        ) {
            let c = make_quadratic_cost(psd(&qe, 2), psd(&re, 1)).unwrap();
            let mut x = DVector::from_vec(xs);
            if x.norm() > 0.0 { x *= d / x.norm(); }
            let u = dvector![us * d];
            prop_assert!(c.eval(0, &x, &u).abs() <= c.value_bound() * d * d * (1.0 + 1e-12));
            prop_assert!(c.grad_x(0, &x, &u).norm() <= c.grad_bound() * d * (1.0 + 1e-12));
            prop_assert!(c.grad_u(0, &x, &u).norm() <= c.grad_bound() * d * (1.0 + 1e-12));
        }

        #[test]
        fn quadratic_midpoint_convexity(
            qe in proptest::collection::vec(-1.0f64..1.0, 4),
            p in proptest::collection::vec(-5.0f64..5.0, 6),
        ) {
            let c = make_quadratic_cost(psd(&qe, 2), DMatrix::identity(1, 1)).unwrap();
            let (x1, x2) = (dvector![p[0], p[1]], dvector![p[2], p[3]]);
            let (u1, u2) = (dvector![p[4]], dvector![p[5]]);
            let mid = c.eval(0, &((&x1 + &x2) / 2.0), &((&u1 + &u2) / 2.0));
            let avg = (c.eval(0, &x1, &u1) + c.eval(0, &x2, &u2)) / 2.0;
            prop_assert!(avg - mid >= -1e-10);
        }

        #[test]
        fn counterexample_bounds_for_unit_radius_and_up(x in -1.0f64..1.0, horizon in 1usize..10_000) {
            let c = make_counterexample_cost(horizon, 1).unwrap();
            let u = dvector![0.0];
            let xv = dvector![x];
            prop_assert!(c.eval(0, &xv, &u) <= c.value_bound());
            prop_assert!(c.grad_x(0, &xv, &u).norm() <= c.grad_bound());
        }
    }
}
