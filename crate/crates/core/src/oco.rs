//! Online convex optimization with memory: projected OGD, Online Newton Step
//! for square losses, and the step-size constants that tie them to control.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, ControlError, Result};
use crate::linalg::{clip_norm, is_symmetric, min_eigenvalue};
use crate::policy::{project_policy, DisturbancePolicy};

/// A closed convex set with a Euclidean projection.
pub trait ConvexSet: Send + Sync {
    fn dim(&self) -> usize;
    fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    fn contains(&self, x: &DVector<f64>, tol: f64) -> bool;
    /// `max ‖x − y‖` over the set.
    fn diameter(&self) -> f64;
}

/// Axis-aligned box `lo ≤ x ≤ hi`; an interval when one-dimensional.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl BoxSet {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        check_dim("box bounds", lo.len(), hi.len())?;
        if lo.iter().zip(hi.iter()).any(|(l, h)| !(l <= h)) {
            return Err(ControlError::InvalidParameter {
                name: "box",
                reason: "every lower bound must be ≤ its upper bound".into(),
            });
        }
        Ok(Self { lo, hi })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, lo), DVector::from_element(1, hi))
    }

    pub fn symmetric(radii: &[f64]) -> Result<Self> {
        let hi = DVector::from_column_slice(radii);
        Self::new(-&hi, hi)
    }

    fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i].clamp(self.lo[i], self.hi[i]))
    }
}

impl ConvexSet for BoxSet {
    fn dim(&self) -> usize {
        self.lo.len()
    }
    fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("box projection", self.dim(), x.len())?;
        Ok(self.clamp(x))
    }
    fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim()
            && (0..x.len()).all(|i| x[i] >= self.lo[i] - tol && x[i] <= self.hi[i] + tol)
    }
    fn diameter(&self) -> f64 {
        (&self.hi - &self.lo).norm()
    }
}

/// `‖x − center‖ ≤ radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    pub center: DVector<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(ControlError::InvalidParameter {
                name: "radius",
                reason: format!("must be non-negative, got {radius}"),
            });
        }
        Ok(Self { center, radius })
    }
}

impl ConvexSet for Ball {
    fn dim(&self) -> usize {
        self.center.len()
    }
    fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("ball projection", self.dim(), x.len())?;
        let mut d = x - &self.center;
        clip_norm(&mut d, self.radius);
        Ok(&self.center + d)
    }
    fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim() && (x - &self.center).norm() <= self.radius + tol
    }
    fn diameter(&self) -> f64 {
        2.0 * self.radius
    }
}

/// The disturbance-action constraint set in flattened coordinates: block `i`
/// has spectral norm at most `r_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBallProduct {
    template: DisturbancePolicy,
}

impl SpectralBallProduct {
    pub fn new(input_dim: usize, state_dim: usize, radii: Vec<f64>) -> Self {
        Self {
            template: DisturbancePolicy::zeros(input_dim, state_dim, radii),
        }
    }

    pub fn from_policy(policy: &DisturbancePolicy) -> Self {
        Self::new(policy.input_dim(), policy.state_dim(), policy.radii().to_vec())
    }

    pub fn radii(&self) -> &[f64] {
        self.template.radii()
    }

    pub fn to_policy(&self, x: &DVector<f64>) -> Result<DisturbancePolicy> {
        self.template.with_flat(x)
    }
}

impl ConvexSet for SpectralBallProduct {
    fn dim(&self) -> usize {
        self.template.num_params()
    }
    fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(project_policy(&self.to_policy(x)?)?.flatten())
    }
    fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        match self.to_policy(x) {
            Ok(p) => p
                .blocks()
                .iter()
                .zip(self.radii())
                .all(|(m, r)| crate::linalg::spectral_norm(m) <= r + tol),
            Err(_) => false,
        }
    }
    /// `2 (Σ_i r_i² · min(d_u, d_x))^{1/2}`: antipodal blocks with every
    /// singular value at the radius.
    fn diameter(&self) -> f64 {
        let rank = self.template.input_dim().min(self.template.state_dim()) as f64;
        2.0 * (self.radii().iter().map(|r| r * r).sum::<f64>() * rank).sqrt()
    }
}

/// Projected online gradient descent; every iterate stays in the set.
pub struct OgdMemoryState<S: ConvexSet> {
    point: DVector<f64>,
    eta: f64,
    set: S,
    steps: usize,
}

impl<S: ConvexSet> OgdMemoryState<S> {
    pub fn new(start: DVector<f64>, eta: f64, set: S) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(ControlError::InvalidParameter {
                name: "eta",
                reason: format!("must be positive and finite, got {eta}"),
            });
        }
        let point = set.project(&start)?;
        Ok(Self {
            point,
            eta,
            set,
            steps: 0,
        })
    }

    pub fn point(&self) -> &DVector<f64> {
        &self.point
    }
    pub fn eta(&self) -> f64 {
        self.eta
    }
    pub fn set(&self) -> &S {
        &self.set
    }
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `x ← Π(x − η g)`; returns `‖x_new − x_old‖`.
    pub fn step(&mut self, gradient: &DVector<f64>) -> Result<f64> {
        check_dim("gradient", self.point.len(), gradient.len())?;
        let mut moved = self.point.clone();
        moved.axpy(-self.eta, gradient, 1.0);
        let next = self.set.project(&moved)?;
        let movement = (&next - &self.point).norm();
        self.point = next;
        self.steps += 1;
        Ok(movement)
    }
}

pub fn ogd_memory_step<S: ConvexSet>(
    mut state: OgdMemoryState<S>,
    gradient: &DVector<f64>,
) -> Result<OgdMemoryState<S>> {
    state.step(gradient)?;
    Ok(state)
}

/// Feasible sets on which the `A`-norm projection of ONS is computable.
#[derive(Debug, Clone, PartialEq)]
pub enum OnsDomain {
    Box(BoxSet),
    Ball(Ball),
}

impl OnsDomain {
    pub fn dim(&self) -> usize {
        match self {
            OnsDomain::Box(b) => b.dim(),
            OnsDomain::Ball(b) => b.dim(),
        }
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        match self {
            OnsDomain::Box(b) => b.contains(x, tol),
            OnsDomain::Ball(b) => b.contains(x, tol),
        }
    }

    /// `argmin_{x ∈ K} (x − y)ᵀ A (x − y)` for symmetric positive definite `A`.
    pub fn project_in_norm(&self, a: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("A-norm projection", self.dim(), y.len())?;
        match self {
            OnsDomain::Box(b) => Ok(box_projection_in_norm(b, a, y)),
            OnsDomain::Ball(b) => ball_projection_in_norm(b, a, y),
        }
    }
}

pub const PROJECTION_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100_000;

/// Cyclic coordinate descent on the box-constrained quadratic. Each
/// coordinate update is exact, so one dimension needs a single sweep.
fn box_projection_in_norm(b: &BoxSet, a: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let n = y.len();
    let mut x = b.clamp(y);
    for _ in 0..MAX_SWEEPS {
        let mut change: f64 = 0.0;
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                if j != i {
                    s += a[(i, j)] * (x[j] - y[j]);
                }
            }
            let xi = (y[i] - s / a[(i, i)]).clamp(b.lo[i], b.hi[i]);
            change = change.max((xi - x[i]).abs());
            x[i] = xi;
        }
        if change <= PROJECTION_TOL {
            break;
        }
    }
    x
}

/// KKT: `x(λ) − c = (A + λI)⁻¹ A (y − c)`, with `λ ≥ 0` found by bisection so
/// that `‖x(λ) − c‖ = r`. Diagonalizing `A` once makes each trial `O(n)`.
fn ball_projection_in_norm(b: &Ball, a: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let d = y - &b.center;
    if d.norm() <= b.radius {
        return Ok(y.clone());
    }
    if b.radius == 0.0 {
        return Ok(b.center.clone());
    }
    let eig = a.clone().symmetric_eigen();
    let coords = eig.eigenvectors.tr_mul(&d);
    let lam = &eig.eigenvalues;
    let at = |mu: f64| -> DVector<f64> {
        DVector::from_fn(coords.len(), |i, _| lam[i] * coords[i] / (lam[i] + mu))
    };
    let (mut lo, mut hi) = (0.0, lam.max().max(1.0));
    while at(hi).norm() > b.radius {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(ControlError::Singular("ball projection multiplier"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid).norm() > b.radius {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= PROJECTION_TOL * hi.max(1.0) {
            break;
        }
    }
    let mut offset = &eig.eigenvectors * at(hi);
    clip_norm(&mut offset, b.radius);
    Ok(&b.center + offset)
}

/// Online Newton Step for square losses.
#[derive(Debug, Clone)]
pub struct OnsState {
    point: DVector<f64>,
    a: DMatrix<f64>,
    delta: f64,
    domain: OnsDomain,
    steps: usize,
    last_residual: f64,
}

pub const DEFAULT_ONS_DELTA: f64 = 1e-4;

impl OnsState {
    pub fn new(start: DVector<f64>, delta: f64, domain: OnsDomain) -> Result<Self> {
        check_dim("ONS start", domain.dim(), start.len())?;
        if !(delta > 0.0) {
            return Err(ControlError::InvalidParameter {
                name: "delta",
                reason: format!("must be positive, got {delta}"),
            });
        }
        let n = start.len();
        let a = DMatrix::identity(n, n) * delta;
        let point = domain.project_in_norm(&a, &start)?;
        Ok(Self {
            point,
            a,
            delta,
            domain,
            steps: 0,
            last_residual: 0.0,
        })
    }

    pub fn point(&self) -> &DVector<f64> {
        &self.point
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn domain(&self) -> &OnsDomain {
        &self.domain
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    /// `‖A_t z − ∇_t‖` of the most recent solve.
    pub fn last_residual(&self) -> f64 {
        self.last_residual
    }

    /// `x ← Π^{A_t}(x − A_t⁻¹∇)`, then `A_{t+1} = A_t + ∇²`. Returns the movement.
    pub fn step(&mut self, gradient: &DVector<f64>, hessian: &DMatrix<f64>) -> Result<f64> {
        let n = self.point.len();
        check_dim("ONS gradient", n, gradient.len())?;
        check_dim("ONS hessian", n, hessian.nrows())?;
        check_dim("ONS hessian", n, hessian.ncols())?;
        if !is_symmetric(hessian, 1e-12) || min_eigenvalue(hessian) < -1e-10 * hessian.amax().max(1.0) {
            return Err(ControlError::InvalidParameter {
                name: "hessian",
                reason: "must be symmetric positive semidefinite".into(),
            });
        }
        let chol = self
            .a
            .clone()
            .cholesky()
            .ok_or(ControlError::Singular("ONS matrix A_t"))?;
        let z = chol.solve(gradient);
        self.last_residual = (&self.a * &z - gradient).norm();
        let target = &self.point - z;
        let next = self.domain.project_in_norm(&self.a, &target)?;
        let movement = (&next - &self.point).norm();
        self.point = next;
        self.a += hessian;
        self.steps += 1;
        Ok(movement)
    }
}

pub fn ons_square_step(
    mut state: OnsState,
    gradient: &DVector<f64>,
    hessian: &DMatrix<f64>,
) -> Result<OnsState> {
    state.step(gradient, hessian)?;
    Ok(state)
}

/// Problem parameters feeding [`derive_constants`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcoParams {
    pub kappa: f64,
    pub gamma: f64,
    pub kappa_b: f64,
    pub w: f64,
    pub g: f64,
    pub d: f64,
    pub h: usize,
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct OcoConstants {
    /// State and action bound `D`.
    pub state_bound: f64,
    /// Gradient bound `G_f` on `∇g_t`.
    pub g_f: f64,
    /// Coordinate Lipschitz constant `L`.
    pub lipschitz: f64,
    /// Diameter of the policy set.
    pub d_m: f64,
    pub eta: f64,
}

/// `D = W(κ² + Hκ_Bκ²a) / (γ(1 − κ²(1−γ)^{H+1})) + aW/γ` with `a = κ_Bκ³`.
pub fn state_bound(kappa: f64, gamma: f64, kappa_b: f64, w: f64, h: usize) -> Result<f64> {
    let a = kappa_b * kappa.powi(3);
    let k2 = kappa * kappa;
    let denom = gamma * (1.0 - k2 * (1.0 - gamma).powi(h as i32 + 1));
    if !(denom > 0.0) {
        return Err(ControlError::StateBoundDiverges);
    }
    Ok(w * (k2 + h as f64 * kappa_b * k2 * a) / denom + a * w / gamma)
}

pub fn derive_constants(p: &OcoParams) -> Result<OcoConstants> {
    let positive = [
        ("kappa", p.kappa),
        ("kappa_B", p.kappa_b),
        ("W", p.w),
        ("G", p.g),
        ("d", p.d),
    ];
    for (name, v) in positive {
        if !(v > 0.0) {
            return Err(ControlError::InvalidParameter {
                name,
                reason: format!("must be positive, got {v}"),
            });
        }
    }
    if !(p.gamma > 0.0 && p.gamma <= 1.0) {
        return Err(ControlError::InvalidParameter {
            name: "gamma",
            reason: format!("must lie in (0, 1], got {}", p.gamma),
        });
    }
    if p.h == 0 || p.t == 0 {
        return Err(ControlError::InvalidParameter {
            name: "H/T",
            reason: "must be at least 1".into(),
        });
    }
    let a = p.kappa_b * p.kappa.powi(3);
    let h = p.h as f64;
    let state_bound = state_bound(p.kappa, p.gamma, p.kappa_b, p.w, p.h)?;
    let g_f = p.g * state_bound * p.w * h * p.d * (2.0 * a / p.gamma + h);
    let lipschitz = 2.0 * p.g * state_bound * p.w * a;
    let d_m = a * p.d.sqrt() / p.gamma;
    let eta = d_m / (g_f * (g_f + lipschitz * h * h) * p.t as f64).sqrt();
    Ok(OcoConstants {
        state_bound,
        g_f,
        lipschitz,
        d_m,
        eta,
    })
}

/// `D²/η + T G_f² η + L m² η G_f T` for losses with memory `m`.
pub fn ogd_memory_regret_bound(d: f64, eta: f64, t: usize, g_f: f64, lipschitz: f64, memory: usize) -> f64 {
    let t = t as f64;
    let m = memory as f64;
    d * d / eta + t * g_f * g_f * eta + lipschitz * m * m * eta * g_f * t
}

/// `Σ losses − Σ comparator`, on sequences aligned step by step.
pub fn policy_regret(losses_with_memory: &[f64], comparator_losses: &[f64]) -> Result<f64> {
    if losses_with_memory.len() != comparator_losses.len() {
        return Err(ControlError::LengthMismatch {
            left: losses_with_memory.len(),
            right: comparator_losses.len(),
        });
    }
    Ok(losses_with_memory.iter().sum::<f64>() - comparator_losses.iter().sum::<f64>())
}
