//! The plant: `x_{t+1} = A x_t + B u_t + w_t`, its cost functions and the
//! adversary's disturbance streams.

mod buffer;
mod cost;
mod disturbance;

pub use buffer::DisturbanceBuffer;
pub use cost::{make_counterexample_cost, make_quadratic_cost, Cost, QuadraticCost};
pub use disturbance::{read_replay_csv, write_replay_csv, DisturbanceGenerator, DisturbanceKind};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, ControlError, Result};
use crate::linalg::spectral_norm;

/// Relative slack allowed when checking a computed norm against a declared bound.
pub(crate) const BOUND_SLACK: f64 = 1e-9;

/// A fully observed linear time-invariant plant with declared norm bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct LdsSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    kappa_a: f64,
    kappa_b: f64,
    w_bound: f64,
}

impl LdsSystem {
    /// Builds the system and checks `‖A‖ ≤ κ_A`, `‖B‖ ≤ κ_B` in spectral norm.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        kappa_a: f64,
        kappa_b: f64,
        w_bound: f64,
    ) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(ControlError::InvalidParameter {
                name: "A",
                reason: format!("must be square and non-empty, got {}x{}", a.nrows(), a.ncols()),
            });
        }
        check_dim("B rows", a.nrows(), b.nrows())?;
        if b.ncols() == 0 {
            return Err(ControlError::InvalidParameter {
                name: "B",
                reason: "needs at least one input column".into(),
            });
        }
        if !(w_bound > 0.0 && w_bound.is_finite()) {
            return Err(ControlError::InvalidParameter {
                name: "W",
                reason: format!("must be positive, got {w_bound}"),
            });
        }
        let na = spectral_norm(&a);
        if na > kappa_a * (1.0 + BOUND_SLACK) + BOUND_SLACK {
            return Err(ControlError::BoundViolated {
                what: "spectral norm of A",
                value: na,
                bound: kappa_a,
            });
        }
        let nb = spectral_norm(&b);
        if nb > kappa_b * (1.0 + BOUND_SLACK) + BOUND_SLACK {
            return Err(ControlError::BoundViolated {
                what: "spectral norm of B",
                value: nb,
                bound: kappa_b,
            });
        }
        Ok(Self {
            a,
            b,
            kappa_a,
            kappa_b,
            w_bound,
        })
    }

    /// Uses the measured spectral norms as `κ_A`, `κ_B`.
    pub fn with_tight_bounds(a: DMatrix<f64>, b: DMatrix<f64>, w_bound: f64) -> Result<Self> {
        let ka = spectral_norm(&a);
        let kb = spectral_norm(&b);
        Self::new(a, b, ka, kb, w_bound)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn kappa_a(&self) -> f64 {
        self.kappa_a
    }
    pub fn kappa_b(&self) -> f64 {
        self.kappa_b
    }
    pub fn w_bound(&self) -> f64 {
        self.w_bound
    }
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// `A x + B u + w`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_vectors(x, u)?;
        check_dim("disturbance", self.state_dim(), w.len())?;
        let mut next = &self.a * x;
        next.gemv(1.0, &self.b, u, 1.0);
        next += w;
        Ok(next)
    }

    /// `x_next − A x − B u`: the disturbance that explains an observed transition.
    pub fn recover_disturbance(
        &self,
        x_next: &DVector<f64>,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.check_vectors(x, u)?;
        check_dim("next state", self.state_dim(), x_next.len())?;
        let mut w = x_next.clone();
        w.gemv(-1.0, &self.a, x, 1.0);
        w.gemv(-1.0, &self.b, u, 1.0);
        Ok(w)
    }

    /// `A − B K`.
    pub fn closed_loop(&self, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("K rows", self.input_dim(), k.nrows())?;
        check_dim("K cols", self.state_dim(), k.ncols())?;
        Ok(&self.a - &self.b * k)
    }

    fn check_vectors(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        check_dim("state", self.state_dim(), x.len())?;
        check_dim("action", self.input_dim(), u.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn scalar(a: f64, b: f64) -> LdsSystem {
        LdsSystem::with_tight_bounds(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn step_zero_case() {
        let sys = scalar(0.0, 1.0);
        let x = sys.step(&dvector![0.0], &dvector![0.0], &dvector![0.0]).unwrap();
        assert_eq!(x, dvector![0.0]);
    }

    #[test]
    fn step_scalar_arithmetic() {
        let sys = scalar(0.5, 1.0);
        let x = sys.step(&dvector![2.0], &dvector![1.0], &dvector![0.25]).unwrap();
        assert_eq!(x[0], 2.25);
    }

    #[test]
    fn step_identity_matrices() {
        let sys = LdsSystem::with_tight_bounds(DMatrix::identity(2, 2), DMatrix::identity(2, 2), 2.0)
            .unwrap();
        let x = sys
            .step(&dvector![1.0, 0.0], &dvector![0.0, 1.0], &dvector![1.0, 1.0])
            .unwrap();
        assert_eq!(x, dvector![2.0, 2.0]);
    }

    #[test]
    fn recover_inverts_scalar_step() {
        let sys = scalar(0.5, 1.0);
        let w = sys
            .recover_disturbance(&dvector![2.25], &dvector![2.0], &dvector![1.0])
            .unwrap();
        assert_eq!(w[0], 0.25);
        let z = sys
            .recover_disturbance(&dvector![0.0], &dvector![0.0], &dvector![0.0])
            .unwrap();
        assert_eq!(z[0], 0.0);
    }

    #[test]
    fn rejects_loose_bounds_and_bad_shapes() {
        let a = DMatrix::from_element(1, 1, 2.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            LdsSystem::new(a.clone(), b.clone(), 1.0, 1.0, 1.0),
            Err(ControlError::BoundViolated { .. })
        ));
        assert!(LdsSystem::new(a.clone(), b.clone(), 2.0, 1.0, 0.0).is_err());
        let sys = LdsSystem::new(a, b, 2.0, 1.0, 1.0).unwrap();
        assert!(matches!(
            sys.step(&dvector![1.0, 2.0], &dvector![0.0], &dvector![0.0]),
            Err(ControlError::DimensionMismatch { .. })
        ));
    }
}
