//! Disturbance-action policies `u_t = −K x_t + Σ_i M^[i] w_{t−i}`, their
//! spectral-norm constraint set and the linear-comparator embedding.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, ControlError, Result};
use crate::lds::{DisturbanceBuffer, LdsSystem, BOUND_SLACK};
use crate::linalg::{matrix_powers, spectral_norm};

/// Per-entry tolerance used when comparing policies.
pub const POLICY_EQ_TOL: f64 = 1e-12;
/// Slack on the radius when testing feasibility.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// `A − BK = Hm · L · Hm⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub hm: DMatrix<f64>,
    pub l: DMatrix<f64>,
}

/// A fixed linear feedback `K` with its claimed `(κ, γ)` strong-stability
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilizingController {
    k: DMatrix<f64>,
    kappa: f64,
    gamma: f64,
    certificate: Option<Certificate>,
}

impl StabilizingController {
    pub fn new(k: DMatrix<f64>, kappa: f64, gamma: f64) -> Result<Self> {
        if !(kappa >= 1.0) {
            return Err(ControlError::InvalidParameter {
                name: "kappa",
                reason: format!("must be ≥ 1, got {kappa}"),
            });
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(ControlError::InvalidParameter {
                name: "gamma",
                reason: format!("must lie in (0, 1], got {gamma}"),
            });
        }
        let nk = spectral_norm(&k);
        if nk > kappa * (1.0 + BOUND_SLACK) + BOUND_SLACK {
            return Err(ControlError::BoundViolated {
                what: "spectral norm of K",
                value: nk,
                bound: kappa,
            });
        }
        Ok(Self {
            k,
            kappa,
            gamma,
            certificate: None,
        })
    }

    pub fn with_certificate(mut self, hm: DMatrix<f64>, l: DMatrix<f64>) -> Self {
        self.certificate = Some(Certificate { hm, l });
        self
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }
    pub fn kappa(&self) -> f64 {
        self.kappa
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn certificate(&self) -> Option<&Certificate> {
        self.certificate.as_ref()
    }

    /// Same gain with a different claimed decay rate.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut c = Self::new(self.k.clone(), self.kappa, gamma)?;
        c.certificate = self.certificate.clone();
        Ok(c)
    }
}

/// Memory length `H = ⌈2 κ_B κ³ ln(T) / γ⌉`, clamped to `[1, ⌈T⌉]`.
///
/// A relative slack of `1e-12` keeps values like `8.000000000000002` from
/// rounding up to the next integer.
pub fn horizon_for(kappa_b: f64, kappa: f64, gamma: f64, horizon: f64) -> usize {
    let exact = 2.0 * kappa_b * kappa.powi(3) * horizon.ln() / gamma;
    let raw = (exact - 1e-12 * exact.abs()).ceil();
    let upper = horizon.ceil().max(1.0);
    raw.clamp(1.0, upper) as usize
}

/// `r_i = κ_B κ³ (1 − γ)^i` for `i = 1..=h`.
pub fn constraint_radii(kappa_b: f64, kappa: f64, gamma: f64, h: usize) -> Vec<f64> {
    let a = kappa_b * kappa.powi(3);
    (1..=h).map(|i| a * (1.0 - gamma).powi(i as i32)).collect()
}

/// The blocks `M^[1] … M^[H]` (stored zero-based) and their radii.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbancePolicy {
    blocks: Vec<DMatrix<f64>>,
    radii: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyJson {
    #[serde(rename = "H")]
    h: usize,
    blocks: Vec<Vec<f64>>,
    radii: Vec<f64>,
}

impl DisturbancePolicy {
    pub fn new(blocks: Vec<DMatrix<f64>>, radii: Vec<f64>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(ControlError::InvalidParameter {
                name: "H",
                reason: "policy needs at least one block".into(),
            });
        }
        check_dim("radii", blocks.len(), radii.len())?;
        let shape = blocks[0].shape();
        for b in &blocks {
            check_dim("block rows", shape.0, b.nrows())?;
            check_dim("block cols", shape.1, b.ncols())?;
        }
        if let Some(r) = radii.iter().find(|r| !(**r >= 0.0)) {
            return Err(ControlError::InvalidParameter {
                name: "radii",
                reason: format!("must be non-negative, got {r}"),
            });
        }
        Ok(Self { blocks, radii })
    }

    /// All-zero blocks: the pure linear controller.
    pub fn zeros(input_dim: usize, state_dim: usize, radii: Vec<f64>) -> Self {
        let blocks = vec![DMatrix::zeros(input_dim, state_dim); radii.len()];
        Self { blocks, radii }
    }

    pub fn h(&self) -> usize {
        self.blocks.len()
    }
    pub fn input_dim(&self) -> usize {
        self.blocks[0].nrows()
    }
    pub fn state_dim(&self) -> usize {
        self.blocks[0].ncols()
    }
    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }
    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    /// `M^[i]`, one-based.
    pub fn block(&self, i: usize) -> &DMatrix<f64> {
        &self.blocks[i - 1]
    }

    pub fn num_params(&self) -> usize {
        self.h() * self.input_dim() * self.state_dim()
    }

    pub fn is_feasible(&self) -> bool {
        self.blocks
            .iter()
            .zip(&self.radii)
            .all(|(b, r)| spectral_norm(b) <= r + FEASIBILITY_TOL)
    }

    /// Index of the first block (one-based) whose norm exceeds its radius.
    pub fn first_infeasible(&self) -> Option<usize> {
        self.blocks
            .iter()
            .zip(&self.radii)
            .position(|(b, r)| spectral_norm(b) > r + FEASIBILITY_TOL)
            .map(|i| i + 1)
    }

    /// Block-major, row-major within each block.
    pub fn flatten(&self) -> DVector<f64> {
        let (du, dx) = (self.input_dim(), self.state_dim());
        let mut out = DVector::zeros(self.num_params());
        for (r, b) in self.blocks.iter().enumerate() {
            for p in 0..du {
                for q in 0..dx {
                    out[r * du * dx + p * dx + q] = b[(p, q)];
                }
            }
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) keeping this policy's shape and radii.
    pub fn with_flat(&self, flat: &DVector<f64>) -> Result<Self> {
        Self::from_flat(flat, self.input_dim(), self.state_dim(), self.radii.clone())
    }

    pub fn from_flat(
        flat: &DVector<f64>,
        input_dim: usize,
        state_dim: usize,
        radii: Vec<f64>,
    ) -> Result<Self> {
        let per = input_dim * state_dim;
        check_dim("flat policy", radii.len() * per, flat.len())?;
        let blocks = (0..radii.len())
            .map(|r| {
                DMatrix::from_fn(input_dim, state_dim, |p, q| flat[r * per + p * state_dim + q])
            })
            .collect();
        Self::new(blocks, radii)
    }

    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        self.h() == other.h()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.shape() == b.shape() && (a - b).amax() <= tol)
    }

    pub fn to_json(&self) -> String {
        let j = PolicyJson {
            h: self.h(),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    (0..b.nrows())
                        .flat_map(|p| (0..b.ncols()).map(move |q| b[(p, q)]))
                        .collect()
                })
                .collect(),
            radii: self.radii.clone(),
        };
        serde_json::to_string(&j).expect("policy serialization cannot fail")
    }

    /// Blocks are flat row-major arrays, so the block shape must be supplied.
    pub fn from_json(text: &str, input_dim: usize, state_dim: usize) -> Result<Self> {
        let j: PolicyJson = serde_json::from_str(text).map_err(|e| ControlError::InvalidParameter {
            name: "policy json",
            reason: e.to_string(),
        })?;
        check_dim("policy json H", j.h, j.blocks.len())?;
        let blocks = j
            .blocks
            .iter()
            .map(|flat| {
                check_dim("policy json block", input_dim * state_dim, flat.len())?;
                Ok(DMatrix::from_row_slice(input_dim, state_dim, flat))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(blocks, j.radii)
    }
}

/// `−K x + Σ_{i=1}^{H} M^[i] w_{t−i}`, with `t = buf.now()`.
pub fn policy_action(
    ctrl: &StabilizingController,
    policy: &DisturbancePolicy,
    x: &DVector<f64>,
    buf: &DisturbanceBuffer,
) -> Result<DVector<f64>> {
    check_dim("state", ctrl.k.ncols(), x.len())?;
    let mut u = -(&ctrl.k * x);
    for (i, m) in policy.blocks.iter().enumerate() {
        let w = buf.lag(i + 1)?;
        u.gemv(1.0, m, w, 1.0);
    }
    Ok(u)
}

/// Nearest matrix (Frobenius) with spectral norm at most `radius`.
///
/// Singular values are clipped through the eigendecomposition of `mᵀm`:
/// with `mᵀm = V Λ Vᵀ`, the projection is `m V diag(min(1, r/√λ)) Vᵀ`, which
/// equals `U diag(min(σ, r)) Vᵀ` without ever forming `U`. nalgebra's 2×2 SVD
/// loses accuracy on rank-deficient blocks, which sit on the boundary of the
/// constraint set all the time, so it is not used here.
pub fn project_block(m: &DMatrix<f64>, radius: f64, block: usize) -> Result<DMatrix<f64>> {
    if radius <= 0.0 {
        return Ok(DMatrix::zeros(m.nrows(), m.ncols()));
    }
    // Row or column vectors: spectral norm is the Euclidean norm.
    if m.nrows() == 1 || m.ncols() == 1 {
        let n = m.norm();
        return Ok(if n > radius { m * (radius / n) } else { m.clone() });
    }
    let eig = m
        .tr_mul(m)
        .try_symmetric_eigen(f64::EPSILON, 0)
        .ok_or(ControlError::DecompositionFailed { block })?;
    let scale = eig.eigenvalues.map(|l| {
        let s = l.max(0.0).sqrt();
        if s > radius {
            radius / s
        } else {
            1.0
        }
    });
    if scale.iter().all(|f| *f == 1.0) {
        return Ok(m.clone());
    }
    let v = &eig.eigenvectors;
    Ok(m * v * DMatrix::from_diagonal(&scale) * v.transpose())
}

/// Euclidean projection onto the product of spectral-norm balls, block by block.
pub fn project_policy(policy: &DisturbancePolicy) -> Result<DisturbancePolicy> {
    let blocks = policy
        .blocks
        .iter()
        .zip(&policy.radii)
        .enumerate()
        .map(|(i, (b, r))| project_block(b, *r, i + 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(DisturbancePolicy {
        blocks,
        radii: policy.radii.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StabilityCheck {
    Certificate,
    Decay,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub check: StabilityCheck,
    pub passed: bool,
    /// First power `i` with `‖(A−BK)^i‖ > κ²(1−γ)^i`, for the decay check.
    pub first_violation: Option<usize>,
    pub details: String,
}

/// Checks `(κ, γ)`-strong stability of `ctrl` on `sys`.
///
/// With a certificate the three defining conditions are checked directly.
/// Without one the implied decay `‖(A−BK)^i‖ ≤ κ²(1−γ)^i` is checked for
/// `i = 0..=depth`.
pub fn verify_strong_stability(
    sys: &LdsSystem,
    ctrl: &StabilizingController,
    depth: usize,
) -> Result<StabilityReport> {
    let closed = sys.closed_loop(&ctrl.k)?;
    let (kappa, gamma) = (ctrl.kappa, ctrl.gamma);
    if let Some(cert) = &ctrl.certificate {
        let n = closed.nrows();
        check_dim("certificate H", n, cert.hm.nrows())?;
        check_dim("certificate L", n, cert.l.nrows())?;
        let inv = cert
            .hm
            .clone()
            .try_inverse()
            .ok_or_else(|| ControlError::CertificateRejected("H is singular".into()))?;
        let residual = (&cert.hm * &cert.l * &inv - &closed).amax();
        let nl = spectral_norm(&cert.l);
        let nh = spectral_norm(&cert.hm);
        let ninv = spectral_norm(&inv);
        let mut failures = Vec::new();
        if residual > 1e-8 {
            failures.push(format!("reconstruction residual {residual:.3e} > 1e-8"));
        }
        if nl > (1.0 - gamma) * (1.0 + BOUND_SLACK) + BOUND_SLACK {
            failures.push(format!("‖L‖ = {nl} > 1 − γ = {}", 1.0 - gamma));
        }
        if nh > kappa * (1.0 + BOUND_SLACK) {
            failures.push(format!("‖H‖ = {nh} > κ = {kappa}"));
        }
        if ninv > kappa * (1.0 + BOUND_SLACK) {
            failures.push(format!("‖H⁻¹‖ = {ninv} > κ = {kappa}"));
        }
        return Ok(StabilityReport {
            check: StabilityCheck::Certificate,
            passed: failures.is_empty(),
            first_violation: None,
            details: if failures.is_empty() {
                "certificate accepted".into()
            } else {
                failures.join("; ")
            },
        });
    }
    let depth = depth.max(1);
    let powers = matrix_powers(&closed, depth);
    let violation = powers.iter().enumerate().find_map(|(i, p)| {
        let bound = kappa * kappa * (1.0 - gamma).powi(i as i32);
        let n = spectral_norm(p);
        (n > bound * (1.0 + BOUND_SLACK) + 1e-12).then_some((i, n, bound))
    });
    Ok(match violation {
        None => StabilityReport {
            check: StabilityCheck::Decay,
            passed: true,
            first_violation: None,
            details: format!("decay bound holds for i = 0..={depth}"),
        },
        Some((i, n, bound)) => StabilityReport {
            check: StabilityCheck::Decay,
            passed: false,
            first_violation: Some(i),
            details: format!("‖(A−BK)^{i}‖ = {n} > κ²(1−γ)^{i} = {bound}"),
        },
    })
}

/// The disturbance-action policy that reproduces the linear controller `K*`
/// on top of the base gain `K` over the first `h` lags:
/// `M^[i] = (K − K*)(A − BK*)^{i−1}`.
///
/// Radii are those of the base controller's constraint set; the result is not
/// projected, so callers can observe whether it fits.
pub fn sufficiency_policy(
    base: &StabilizingController,
    target: &StabilizingController,
    sys: &LdsSystem,
    h: usize,
) -> Result<DisturbancePolicy> {
    let closed_target = sys.closed_loop(&target.k)?;
    sys.closed_loop(&base.k)?;
    let diff = &base.k - &target.k;
    let powers = matrix_powers(&closed_target, h.saturating_sub(1));
    let blocks = powers.iter().map(|p| &diff * p).collect();
    let radii = constraint_radii(sys.kappa_b(), base.kappa, base.gamma, h);
    DisturbancePolicy::new(blocks, radii)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn scalar_sys(a: f64, b: f64) -> LdsSystem {
        LdsSystem::with_tight_bounds(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            1.0,
        )
        .unwrap()
    }

    fn scalar_ctrl(k: f64, kappa: f64, gamma: f64) -> StabilizingController {
        StabilizingController::new(DMatrix::from_element(1, 1, k), kappa, gamma).unwrap()
    }

    #[test]
    fn horizon_examples() {
        let e = std::f64::consts::E;
        assert_eq!(horizon_for(1.0, 1.0, 1.0, e), 2);
        assert_eq!(horizon_for(1.0, 1.0, 0.5, e * e), 8);
        for t in 2..50 {
            assert!(horizon_for(1.0, 1.0, 1.0, t as f64) >= 1);
        }
        assert_eq!(horizon_for(100.0, 3.0, 0.01, 5.0), 5);
    }

    #[test]
    fn controller_rejects_bad_parameters() {
        let k = DMatrix::from_element(1, 1, 0.5);
        assert!(StabilizingController::new(k.clone(), 0.5, 0.5).is_err());
        assert!(StabilizingController::new(k.clone(), 1.0, 0.0).is_err());
        assert!(StabilizingController::new(k.clone(), 1.0, 1.5).is_err());
        assert!(StabilizingController::new(DMatrix::from_element(1, 1, 2.0), 1.0, 0.5).is_err());
    }

    #[test]
    fn action_examples() {
        let ctrl = scalar_ctrl(0.5, 1.0, 0.6);
        let mut buf = DisturbanceBuffer::new(1, 3, 1.0);
        let zero_policy = DisturbancePolicy::zeros(1, 1, vec![1.0]);
        let u = policy_action(&ctrl, &zero_policy, &dvector![0.0], &buf).unwrap();
        assert_eq!(u, dvector![0.0]);
        let u = policy_action(&ctrl, &zero_policy, &dvector![3.0], &buf).unwrap();
        assert_eq!(u, dvector![-1.5]);
        buf.push(dvector![1.0]).unwrap();
        let m = DisturbancePolicy::new(vec![DMatrix::from_element(1, 1, 0.2)], vec![1.0]).unwrap();
        let u = policy_action(&ctrl, &m, &dvector![2.0], &buf).unwrap();
        assert!((u[0] - (-0.8)).abs() < 1e-15);
    }

    #[test]
    fn scalar_clip() {
        let m = DisturbancePolicy::new(vec![DMatrix::from_element(1, 1, 5.0)], vec![1.0]).unwrap();
        let p = project_policy(&m).unwrap();
        assert_eq!(p.block(1)[(0, 0)], 1.0);
        let m = DisturbancePolicy::new(vec![DMatrix::from_element(1, 1, -5.0)], vec![0.5]).unwrap();
        assert_eq!(project_policy(&m).unwrap().block(1)[(0, 0)], -0.5);
    }

    #[test]
    fn diagonal_clip_is_analytic() {
        let d = DMatrix::from_diagonal(&dvector![3.0, -0.2]);
        let p = project_block(&d, 1.0, 1).unwrap();
        let expect = DMatrix::from_diagonal(&dvector![1.0, -0.2]);
        assert!((p - expect).amax() < 1e-12);
    }

    #[test]
    fn feasible_policy_passes_through() {
        let b = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, -0.1, 0.05]);
        let m = DisturbancePolicy::new(vec![b.clone(), b * 0.5], vec![1.0, 0.5]).unwrap();
        let p = project_policy(&m).unwrap();
        assert_eq!(p, m);
    }

    #[test]
    fn stability_examples() {
        let sys = scalar_sys(0.9, 1.0);
        let ctrl = scalar_ctrl(0.5, 1.0, 0.6);
        for depth in [1, 5, 40] {
            assert!(verify_strong_stability(&sys, &ctrl, depth).unwrap().passed);
        }
        let unstable = scalar_sys(1.1, 1.0);
        let r = verify_strong_stability(&unstable, &scalar_ctrl(0.0, 1.0, 0.1), 10).unwrap();
        assert!(!r.passed);
        assert_eq!(r.first_violation, Some(1));
        let dead = scalar_sys(0.5, 1.0);
        assert!(verify_strong_stability(&dead, &scalar_ctrl(0.5, 3.0, 1.0), 20).unwrap().passed);
    }

    #[test]
    fn certificate_checks() {
        let sys = LdsSystem::with_tight_bounds(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.3, 0.0, 0.8]),
            DMatrix::identity(2, 2),
            1.0,
        )
        .unwrap();
        let k = DMatrix::from_row_slice(2, 2, &[0.6, 0.3, 0.0, 0.6]);
        let ok = StabilizingController::new(k.clone(), 1.0, 0.7)
            .unwrap()
            .with_certificate(DMatrix::identity(2, 2), DMatrix::from_diagonal(&dvector![0.3, 0.2]));
        let r = verify_strong_stability(&sys, &ok, 4).unwrap();
        assert_eq!(r.check, StabilityCheck::Certificate);
        assert!(r.passed, "{}", r.details);
        let wrong_l = StabilizingController::new(k.clone(), 1.0, 0.7)
            .unwrap()
            .with_certificate(DMatrix::identity(2, 2), DMatrix::from_diagonal(&dvector![0.3, 0.1]));
        assert!(!verify_strong_stability(&sys, &wrong_l, 4).unwrap().passed);
        let singular = StabilizingController::new(k, 1.0, 0.7)
            .unwrap()
            .with_certificate(DMatrix::zeros(2, 2), DMatrix::identity(2, 2));
        assert!(matches!(
            verify_strong_stability(&sys, &singular, 4),
            Err(ControlError::CertificateRejected(_))
        ));
    }

    #[test]
    fn sufficiency_examples() {
        let sys = scalar_sys(0.9, 1.0);
        let k = scalar_ctrl(0.5, 1.0, 0.6);
        let same = sufficiency_policy(&k, &k, &sys, 4).unwrap();
        assert!(same.blocks().iter().all(|b| b.amax() == 0.0));
        let kstar = scalar_ctrl(0.7, 1.0, 0.6);
        let m = sufficiency_policy(&k, &kstar, &sys, 2).unwrap();
        assert!((m.block(1)[(0, 0)] - (-0.2)).abs() < 1e-15);
        assert!((m.block(2)[(0, 0)] - (-0.04)).abs() < 1e-15);
    }

    #[test]
    fn json_roundtrip_and_layout() {
        let b1 = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let m = DisturbancePolicy::new(vec![b1.clone(), b1 * -0.5], vec![10.0, 5.0]).unwrap();
        let text = m.to_json();
        assert!(text.starts_with(r#"{"H":2,"blocks":[[1.0,2.0,3.0,4.0,5.0,6.0]"#), "{text}");
        assert_eq!(DisturbancePolicy::from_json(&text, 2, 3).unwrap(), m);
        assert!(DisturbancePolicy::from_json(&text, 3, 3).is_err());
    }

    fn block_strategy(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-5.0f64..5.0, rows * cols)
            .prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
    }

    proptest! {
        #[test]
        fn projection_feasible_and_idempotent(
            blocks in proptest::collection::vec(block_strategy(2, 3), 1..5),
            scale in 0.05f64..2.0,
        ) {
            let radii: Vec<f64> = (1..=blocks.len()).map(|i| scale * 0.7f64.powi(i as i32)).collect();
            let m = DisturbancePolicy::new(blocks, radii).unwrap();
            let p = project_policy(&m).unwrap();
            prop_assert!(p.is_feasible());
            let pp = project_policy(&p).unwrap();
            prop_assert!(pp.approx_eq(&p, POLICY_EQ_TOL));
        }

        #[test]
        fn flatten_roundtrip(blocks in proptest::collection::vec(block_strategy(2, 3), 1..4)) {
            let radii = vec![1.0; blocks.len()];
            let m = DisturbancePolicy::new(blocks, radii).unwrap();
            prop_assert_eq!(m.with_flat(&m.flatten()).unwrap(), m);
        }
    }
}
