//! The online control loop and its comparators.
//!
//! [`run_gpc`] plays a disturbance-action policy, recovers each disturbance
//! from the observed transition and takes a projected gradient step on the
//! diagonal surrogate `g_t(M) = f_t(M, …, M)`. The offline solvers compute the
//! best fixed policy and the best fixed linear gain on the same stream.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ControlError, Result};
use crate::lds::{make_counterexample_cost, Cost, DisturbanceBuffer, DisturbanceGenerator, LdsSystem};
use crate::oco::{
    derive_constants, BoxSet, ConvexSet, OcoConstants, OcoParams, OgdMemoryState, OnsDomain, OnsState,
    SpectralBallProduct, DEFAULT_ONS_DELTA,
};
use crate::policy::{constraint_radii, horizon_for, policy_action, DisturbancePolicy, StabilizingController};
use crate::transfer::{DiagonalJacobian, TransferCache};

/// Abort when `‖x_t‖` exceeds this multiple of the state bound `D`.
pub const ABORT_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    OgdM,
    /// Online Newton Step; only for scalar systems, where every policy block
    /// is a number and the constraint set is a box.
    OnsRestricted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaRule {
    /// `D_M / √(G_f (G_f + L H²) T)` from the worst-case constants.
    Theorem,
    /// `scale / (G W √T)`.
    MainTheorem { scale: f64 },
    Fixed(f64),
}

#[derive(Clone)]
pub struct GpcConfig {
    pub system: LdsSystem,
    pub controller: StabilizingController,
    pub cost: Arc<dyn Cost>,
    pub disturbance: DisturbanceGenerator,
    pub horizon: usize,
    pub eta: EtaRule,
    pub memory: Option<usize>,
    pub optimizer: Optimizer,
    pub ons_delta: f64,
}

impl GpcConfig {
    pub fn new(
        system: LdsSystem,
        controller: StabilizingController,
        cost: Arc<dyn Cost>,
        disturbance: DisturbanceGenerator,
        horizon: usize,
    ) -> Self {
        Self {
            system,
            controller,
            cost,
            disturbance,
            horizon,
            eta: EtaRule::Theorem,
            memory: None,
            optimizer: Optimizer::OgdM,
            ons_delta: DEFAULT_ONS_DELTA,
        }
    }

    pub fn with_eta(mut self, eta: EtaRule) -> Self {
        self.eta = eta;
        self
    }
    pub fn with_memory(mut self, h: usize) -> Self {
        self.memory = Some(h);
        self
    }
    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.optimizer = optimizer;
        self
    }
    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn memory_length(&self) -> usize {
        self.memory.unwrap_or_else(|| {
            horizon_for(
                self.system.kappa_b(),
                self.controller.kappa(),
                self.controller.gamma(),
                self.horizon as f64,
            )
        })
    }

    pub fn radii(&self) -> Vec<f64> {
        constraint_radii(
            self.system.kappa_b(),
            self.controller.kappa(),
            self.controller.gamma(),
            self.memory_length(),
        )
    }

    pub fn constants(&self) -> Result<OcoConstants> {
        derive_constants(&OcoParams {
            kappa: self.controller.kappa(),
            gamma: self.controller.gamma(),
            kappa_b: self.system.kappa_b(),
            w: self.system.w_bound(),
            g: self.cost.grad_bound(),
            d: self.system.state_dim().max(self.system.input_dim()) as f64,
            h: self.memory_length(),
            t: self.horizon,
        })
    }

    pub fn step_size(&self) -> Result<f64> {
        let eta = match self.eta {
            EtaRule::Theorem => self.constants()?.eta,
            EtaRule::MainTheorem { scale } => {
                scale / (self.cost.grad_bound() * self.system.w_bound() * (self.horizon as f64).sqrt())
            }
            EtaRule::Fixed(eta) => eta,
        };
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(ControlError::InvalidParameter {
                name: "eta",
                reason: format!("must be positive and finite, got {eta}"),
            });
        }
        Ok(eta)
    }

    fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(ControlError::InvalidParameter {
                name: "T",
                reason: format!("must be at least 2, got {}", self.horizon),
            });
        }
        if self.memory == Some(0) {
            return Err(ControlError::InvalidParameter {
                name: "H",
                reason: "must be at least 1".into(),
            });
        }
        let (dx, du) = (self.system.state_dim(), self.system.input_dim());
        if self.controller.k().shape() != (du, dx) {
            return Err(ControlError::DimensionMismatch {
                context: "controller gain rows",
                expected: du,
                got: self.controller.k().nrows(),
            });
        }
        if self.disturbance.dim() != dx {
            return Err(ControlError::DimensionMismatch {
                context: "disturbance dimension",
                expected: dx,
                got: self.disturbance.dim(),
            });
        }
        Ok(())
    }
}

/// One step of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    /// Disturbance recovered from `(x_{t+1}, x_t, u_t)`.
    pub w: DVector<f64>,
    /// `c_t(x_t, u_t)`.
    pub cost: f64,
    /// `f_t` on the played window.
    pub ideal_cost: f64,
    /// `g_t(M_t)`.
    pub diagonal_cost: f64,
    /// `‖M_t − M_{t−1}‖_F`, zero at `t = 0`.
    pub movement: f64,
    /// `‖∇g_t(M_t)‖`.
    pub gradient_norm: f64,
    /// `‖x_t − y_t‖`.
    pub state_gap: f64,
    /// `‖u_t − v_t‖`.
    pub action_gap: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentTrace {
    pub records: Vec<StepRecord>,
    pub final_policy: DisturbancePolicy,
    pub h: usize,
    pub eta: f64,
    pub constants: OcoConstants,
    /// Running `Σ c_t(x_t, u_t)`, accumulated in the loop.
    pub cumulative_cost: f64,
    pub cumulative_ideal_cost: f64,
    pub cumulative_diagonal_cost: f64,
}

impl ExperimentTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
    pub fn costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cost).collect()
    }
    pub fn ideal_costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.ideal_cost).collect()
    }
    pub fn disturbances(&self) -> Vec<DVector<f64>> {
        self.records.iter().map(|r| r.w.clone()).collect()
    }
    pub fn total_cost(&self) -> f64 {
        self.records.iter().map(|r| r.cost).sum()
    }
    pub fn max_state_norm(&self) -> f64 {
        self.records.iter().map(|r| r.x.norm()).fold(0.0, f64::max)
    }
    pub fn max_gradient_norm(&self) -> f64 {
        self.records.iter().map(|r| r.gradient_norm).fold(0.0, f64::max)
    }
    /// Mean `|c_t − f_t|` over `t ∈ [H, T)`.
    pub fn mean_gap(&self) -> f64 {
        let tail = &self.records[self.h.min(self.records.len())..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(|r| (r.cost - r.ideal_cost).abs()).sum::<f64>() / tail.len() as f64
    }
}

enum Learner {
    Fixed,
    Ogd(OgdMemoryState<SpectralBallProduct>),
    Ons(OnsState),
}

pub fn run_gpc(cfg: &GpcConfig) -> Result<ExperimentTrace> {
    cfg.validate()?;
    let radii = cfg.radii();
    let (dx, du) = (cfg.system.state_dim(), cfg.system.input_dim());
    let start = DisturbancePolicy::zeros(du, dx, radii.clone());
    let learner = match cfg.optimizer {
        Optimizer::OgdM => Learner::Ogd(OgdMemoryState::new(
            start.flatten(),
            cfg.step_size()?,
            SpectralBallProduct::from_policy(&start),
        )?),
        Optimizer::OnsRestricted => {
            if dx != 1 || du != 1 {
                return Err(ControlError::InvalidParameter {
                    name: "optimizer",
                    reason: "ons_restricted needs a scalar system (box-shaped policy set)".into(),
                });
            }
            Learner::Ons(OnsState::new(
                start.flatten(),
                cfg.ons_delta,
                OnsDomain::Box(BoxSet::symmetric(&radii)?),
            )?)
        }
    };
    simulate(cfg, start, learner)
}

/// Rollout with `M_t ≡ policy`.
pub fn run_fixed_policy(cfg: &GpcConfig, policy: &DisturbancePolicy) -> Result<ExperimentTrace> {
    cfg.validate()?;
    let h = cfg.memory_length();
    if policy.h() != h {
        return Err(ControlError::DimensionMismatch {
            context: "fixed policy blocks",
            expected: h,
            got: policy.h(),
        });
    }
    simulate(cfg, policy.clone(), Learner::Fixed)
}

/// `u_t = −K x_t` under the same disturbance stream.
pub fn run_linear_baseline(
    system: &LdsSystem,
    controller: &StabilizingController,
    disturbance: &DisturbanceGenerator,
    cost: Arc<dyn Cost>,
    horizon: usize,
) -> Result<ExperimentTrace> {
    let cfg = GpcConfig::new(system.clone(), controller.clone(), cost, disturbance.clone(), horizon);
    let zero = DisturbancePolicy::zeros(system.input_dim(), system.state_dim(), cfg.radii());
    run_fixed_policy(&cfg, &zero)
}

fn quadratic_hessian(cost: &dyn Cost, t: usize, jac: &DiagonalJacobian, m: &DVector<f64>) -> DMatrix<f64> {
    match cost.as_quadratic() {
        Some(q) => {
            let c = block_weight(&q.q, &q.r);
            2.0 * jac.jacobian.tr_mul(&(c * &jac.jacobian))
        }
        None => {
            let (_, g) = jac.value_and_gradient(cost, t, m);
            &g * g.transpose()
        }
    }
}

fn block_weight(q: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let (nx, nu) = (q.nrows(), r.nrows());
    let mut c = DMatrix::zeros(nx + nu, nx + nu);
    c.view_mut((0, 0), (nx, nx)).copy_from(q);
    c.view_mut((nx, nx), (nu, nu)).copy_from(r);
    c
}

fn simulate(cfg: &GpcConfig, start: DisturbancePolicy, mut learner: Learner) -> Result<ExperimentTrace> {
    let sys = &cfg.system;
    let ctrl = &cfg.controller;
    let cost = cfg.cost.as_ref();
    let h = cfg.memory_length();
    let constants = cfg.constants()?;
    let eta = match learner {
        Learner::Ogd(ref s) => s.eta(),
        _ => 0.0,
    };
    let threshold = ABORT_FACTOR * constants.state_bound;
    let cache = TransferCache::new(sys, ctrl, h)?;
    let (dx, du) = (sys.state_dim(), sys.input_dim());

    let mut policy = start;
    let mut x = DVector::zeros(dx);
    let mut buf = DisturbanceBuffer::for_horizon(dx, h, sys.w_bound());
    // a_{t−1}, …, a_{t−1−H}: the policy part of past actions.
    let mut offsets: VecDeque<DVector<f64>> = (0..=h).map(|_| DVector::zeros(du)).collect();
    let mut records = Vec::with_capacity(cfg.horizon);
    let (mut cum, mut cum_ideal, mut cum_diag) = (0.0, 0.0, 0.0);
    let mut movement = 0.0;

    for t in 0..cfg.horizon {
        let u = policy_action(ctrl, &policy, &x, &buf)?;
        let mut a = u.clone();
        a.gemv(1.0, ctrl.k(), &x, 1.0);

        let mut y = DVector::zeros(dx);
        for (k, past) in offsets.iter().enumerate() {
            y.gemv(1.0, cache.closed_power(k), buf.lag(k + 1)?, 1.0);
            y.gemv(1.0, cache.closed_power_b(k), past, 1.0);
        }
        let mut v = a.clone();
        v.gemv(-1.0, ctrl.k(), &y, 1.0);

        let c = cost.eval(t, &x, &u);
        let f = cost.eval(t, &y, &v);

        let m = policy.flatten();
        let jac = DiagonalJacobian::from_buffer(&cache, &buf)?;
        let (g_val, grad) = jac.value_and_gradient(cost, t, &m);

        let w = cfg.disturbance.emit(t)?;
        let x_next = sys.step(&x, &u, &w)?;
        let w_seen = sys.recover_disturbance(&x_next, &x, &u)?;
        buf.push(w_seen.clone())?;

        cum += c;
        cum_ideal += f;
        cum_diag += g_val;
        records.push(StepRecord {
            t,
            state_gap: (&x - &y).norm(),
            action_gap: (&u - &v).norm(),
            x,
            u,
            w: w_seen,
            cost: c,
            ideal_cost: f,
            diagonal_cost: g_val,
            movement,
            gradient_norm: grad.norm(),
        });

        offsets.pop_back();
        offsets.push_front(a);

        movement = match &mut learner {
            Learner::Fixed => 0.0,
            Learner::Ogd(state) => {
                let moved = state.step(&grad)?;
                policy = policy.with_flat(state.point())?;
                moved
            }
            Learner::Ons(state) => {
                let hess = quadratic_hessian(cost, t, &jac, &m);
                let moved = state.step(&grad, &hess)?;
                policy = policy.with_flat(state.point())?;
                moved
            }
        };

        let norm = x_next.norm();
        if !(norm <= threshold) {
            return Err(ControlError::StateDiverged {
                t: t + 1,
                norm,
                threshold,
            });
        }
        x = x_next;
    }

    Ok(ExperimentTrace {
        records,
        final_policy: policy,
        h,
        eta,
        constants,
        cumulative_cost: cum,
        cumulative_ideal_cost: cum_ideal,
        cumulative_diagonal_cost: cum_diag,
    })
}

/// Prefix sums of `c_t` minus prefix sums of the comparator's per-step costs.
pub fn regret_series(trace: &ExperimentTrace, comparator: &[f64]) -> Result<Vec<f64>> {
    if comparator.len() != trace.len() {
        return Err(ControlError::LengthMismatch {
            left: trace.len(),
            right: comparator.len(),
        });
    }
    let mut acc = 0.0;
    Ok(trace
        .records
        .iter()
        .zip(comparator)
        .map(|(r, c)| {
            acc += r.cost - c;
            acc
        })
        .collect())
}

/// Jacobians of `g_t`, `t = 0..T`, for a recorded stream `w_0 … w_{T−1}`.
pub fn diagonal_jacobians(
    cache: &TransferCache,
    disturbances: &[DVector<f64>],
) -> Result<Vec<DiagonalJacobian>> {
    let h = cache.h();
    let dx = cache.state_dim();
    let zero = DVector::zeros(dx);
    (0..disturbances.len())
        .map(|t| {
            let window: Vec<DVector<f64>> = (0..=2 * h)
                .map(|i| {
                    let s = t as i64 - 1 - i as i64;
                    if s < 0 {
                        zero.clone()
                    } else {
                        disturbances[s as usize].clone()
                    }
                })
                .collect();
            DiagonalJacobian::new(cache, &window)
        })
        .collect()
}

/// Per-step `g_t(M)` on a recorded stream.
pub fn diagonal_costs(
    cost: &dyn Cost,
    cache: &TransferCache,
    disturbances: &[DVector<f64>],
    policy: &DisturbancePolicy,
) -> Result<Vec<f64>> {
    let m = policy.flatten();
    Ok(diagonal_jacobians(cache, disturbances)?
        .iter()
        .enumerate()
        .map(|(t, j)| {
            let (y, v) = j.evaluate(&m);
            cost.eval(t, &y, &v)
        })
        .collect())
}

pub const HINDSIGHT_ITERATIONS: usize = 2000;
pub const HINDSIGHT_RANDOM_STARTS: usize = 4;
pub const HINDSIGHT_SEED: u64 = 0x5eed;

#[derive(Debug, Clone)]
pub struct HindsightPolicy {
    pub policy: DisturbancePolicy,
    /// `Σ_t g_t(M*)`.
    pub total_cost: f64,
    /// Gradient-mapping norm `L‖M − Π(M − ∇/L)‖` at the returned point.
    pub residual: f64,
    /// Final objective of each restart, zero start first.
    pub restart_costs: Vec<f64>,
}

impl HindsightPolicy {
    /// `(max − min) / |min|` across restarts.
    pub fn restart_spread(&self) -> f64 {
        let lo = self.restart_costs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.restart_costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi == lo {
            0.0
        } else {
            (hi - lo) / lo.abs().max(f64::MIN_POSITIVE)
        }
    }
}

/// `mᵀPm + bᵀm + c`, the sum of the diagonal costs when `c_t` is quadratic.
struct QuadraticObjective {
    p: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
}

impl QuadraticObjective {
    fn value_and_gradient(&self, m: &DVector<f64>) -> (f64, DVector<f64>) {
        let pm = &self.p * m;
        let mut g = self.b.clone();
        g.axpy(2.0, &pm, 1.0);
        (m.dot(&pm) + self.b.dot(m) + self.c, g)
    }
}

const ACCUMULATE_BATCH: usize = 64;

fn accumulate_quadratic(
    q: &crate::lds::QuadraticCost,
    jacobians: &[DiagonalJacobian],
    params: usize,
) -> QuadraticObjective {
    let weight = block_weight(&q.q, &q.r);
    let lin = {
        let mut l = DVector::zeros(weight.nrows());
        l.rows_mut(0, q.q_lin.len()).copy_from(&q.q_lin);
        l.rows_mut(q.q_lin.len(), q.r_lin.len()).copy_from(&q.r_lin);
        l
    };
    // weight = SᵀS with S = Λ^{1/2} Vᵀ, so Σ JᵀCJ = Σ (SJ)ᵀ(SJ).
    let eig = weight.clone().symmetric_eigen();
    let sqrt_w = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt())) * eig.eigenvectors.transpose();
    let nz = weight.nrows();
    let mut p = DMatrix::zeros(params, params);
    let mut b = DVector::zeros(params);
    let mut c = 0.0;
    let mut stacked = DMatrix::zeros(ACCUMULATE_BATCH * nz, params);
    for chunk in jacobians.chunks(ACCUMULATE_BATCH) {
        if chunk.len() < ACCUMULATE_BATCH {
            stacked = DMatrix::zeros(chunk.len() * nz, params);
        }
        for (k, jac) in chunk.iter().enumerate() {
            let sj = &sqrt_w * &jac.jacobian;
            stacked.rows_mut(k * nz, nz).copy_from(&sj);
            let wz = &weight * &jac.offset;
            let mut lin_t = lin.clone();
            lin_t.axpy(2.0, &wz, 1.0);
            b.gemv_tr(1.0, &jac.jacobian, &lin_t, 1.0);
            c += jac.offset.dot(&wz) + lin.dot(&jac.offset) + q.offset;
        }
        p.gemm_tr(1.0, &stacked, &stacked, 1.0);
    }
    p = (&p + p.transpose()) * 0.5;
    QuadraticObjective { p, b, c }
}

fn random_starts(set: &SpectralBallProduct, count: usize) -> Result<Vec<DVector<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(HINDSIGHT_SEED);
    let per = set.dim() / set.radii().len().max(1);
    (0..count)
        .map(|_| {
            let raw = DVector::from_fn(set.dim(), |i, _| {
                let r = set.radii()[i / per.max(1)];
                r * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            set.project(&raw)
        })
        .collect()
}

/// Minimizes `Σ_t g_t(M)` over the constraint set by projected gradient
/// descent from one zero and four random starts.
pub fn best_policy_in_hindsight(
    disturbances: &[DVector<f64>],
    cost: &dyn Cost,
    controller: &StabilizingController,
    system: &LdsSystem,
    h: usize,
    radii: &[f64],
) -> Result<HindsightPolicy> {
    crate::error::check_dim("radii", h, radii.len())?;
    let cache = TransferCache::new(system, controller, h)?;
    let set = SpectralBallProduct::new(system.input_dim(), system.state_dim(), radii.to_vec());
    let jacobians = diagonal_jacobians(&cache, disturbances)?;
    let mut starts = vec![DVector::zeros(set.dim())];
    starts.extend(random_starts(&set, HINDSIGHT_RANDOM_STARTS)?);

    let solutions = match cost.as_quadratic() {
        Some(q) => {
            let obj = accumulate_quadratic(q, &jacobians, set.dim());
            // P is small and symmetric, so its top eigenvalue is exact and cheap.
            let lipschitz = 2.0 * obj.p.symmetric_eigenvalues().max().max(0.0);
            starts
                .iter()
                .map(|s| fixed_step_descent(&|m| obj.value_and_gradient(m), &set, s.clone(), lipschitz))
                .collect::<Result<Vec<_>>>()?
        }
        None => {
            let eval = |m: &DVector<f64>| generic_value_and_gradient(cost, &jacobians, m);
            starts
                .iter()
                .map(|s| backtracking_descent(&eval, &set, s.clone()))
                .collect::<Result<Vec<_>>>()?
        }
    };

    let restart_costs: Vec<f64> = solutions.iter().map(|s| s.1).collect();
    let best = solutions
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one start");
    Ok(HindsightPolicy {
        policy: set.to_policy(&best.0)?,
        total_cost: best.1,
        residual: best.2,
        restart_costs,
    })
}

/// `Σ_t g_t` through per-step Jacobians; works for any cost.
pub fn generic_value_and_gradient(
    cost: &dyn Cost,
    jacobians: &[DiagonalJacobian],
    m: &DVector<f64>,
) -> (f64, DVector<f64>) {
    let mut total = 0.0;
    let mut grad = DVector::zeros(m.len());
    for (t, jac) in jacobians.iter().enumerate() {
        let (v, g) = jac.value_and_gradient(cost, t, m);
        total += v;
        grad += g;
    }
    (total, grad)
}

type Solution = (DVector<f64>, f64, f64);
/// Objective value and gradient at a flattened policy.
type Objective<'a> = dyn Fn(&DVector<f64>) -> (f64, DVector<f64>) + 'a;

/// Accelerated projected gradient with step `1/L` and function-value
/// restarts: momentum is dropped whenever the objective goes up, which keeps
/// the iteration monotone on flat, rank-deficient objectives.
fn fixed_step_descent(
    eval: &Objective,
    set: &SpectralBallProduct,
    mut m: DVector<f64>,
    lipschitz: f64,
) -> Result<Solution> {
    if !(lipschitz > 0.0) {
        let (v, _) = eval(&m);
        return Ok((m, v, 0.0));
    }
    let mut lipschitz = lipschitz;
    let mut value = eval(&m).0;
    let mut look = m.clone();
    let mut theta: f64 = 1.0;
    for _ in 0..HINDSIGHT_ITERATIONS {
        let (_, g) = eval(&look);
        let mut next = look.clone();
        next.axpy(-1.0 / lipschitz, &g, 1.0);
        let next = set.project(&next)?;
        let next_value = eval(&next).0;
        if next_value > value + 1e-12 * value.abs().max(1.0) {
            // A plain projected step with a valid 1/L cannot increase the
            // objective, so an increase without momentum means L is too small.
            if theta == 1.0 {
                lipschitz *= 2.0;
            }
            look = m.clone();
            theta = 1.0;
            continue;
        }
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let beta = (theta - 1.0) / theta_next;
        look = &next + (&next - &m) * beta;
        theta = theta_next;
        m = next;
        value = next_value;
    }
    let (v, g) = eval(&m);
    let mut probe = m.clone();
    probe.axpy(-1.0 / lipschitz, &g, 1.0);
    let residual = lipschitz * (&m - set.project(&probe)?).norm();
    Ok((m, v, residual))
}

/// Projected gradient with the standard sufficient-decrease backtracking.
fn backtracking_descent(
    eval: &Objective,
    set: &SpectralBallProduct,
    mut m: DVector<f64>,
) -> Result<Solution> {
    let mut step = 1.0;
    let (mut value, mut grad) = eval(&m);
    for _ in 0..HINDSIGHT_ITERATIONS {
        loop {
            let mut trial = m.clone();
            trial.axpy(-step, &grad, 1.0);
            let trial = set.project(&trial)?;
            let d = &trial - &m;
            let (tv, tg) = eval(&trial);
            if tv <= value + grad.dot(&d) + d.norm_squared() / (2.0 * step) || step < 1e-300 {
                m = trial;
                value = tv;
                grad = tg;
                break;
            }
            step *= 0.5;
        }
    }
    let mut probe = m.clone();
    probe.axpy(-step, &grad, 1.0);
    let residual = (&m - set.project(&probe)?).norm() / step;
    Ok((m, value, residual))
}

/// Per-step `c_t(x_t, −K x_t)` under `x_{t+1} = (A − BK) x_t + w_t`, `x_0 = 0`.
/// Stops early with `+∞` once the state overflows.
pub fn linear_rollout_costs(
    system: &LdsSystem,
    k: &DMatrix<f64>,
    disturbances: &[DVector<f64>],
    cost: &dyn Cost,
) -> Result<Vec<f64>> {
    let closed = system.closed_loop(k)?;
    let mut x = DVector::zeros(system.state_dim());
    let mut out = Vec::with_capacity(disturbances.len());
    for (t, w) in disturbances.iter().enumerate() {
        let u = -(k * &x);
        out.push(cost.eval(t, &x, &u));
        x = &closed * &x + w;
        if !x.iter().all(|v| v.is_finite()) {
            out.resize(disturbances.len(), f64::INFINITY);
            break;
        }
    }
    Ok(out)
}

pub fn linear_rollout_cost(
    system: &LdsSystem,
    k: &DMatrix<f64>,
    disturbances: &[DVector<f64>],
    cost: &dyn Cost,
) -> Result<f64> {
    Ok(linear_rollout_costs(system, k, disturbances, cost)?.iter().sum())
}

/// Exhaustive search over candidate gains; `J_T(K)` is not convex in `K`.
pub fn best_linear_in_hindsight(
    disturbances: &[DVector<f64>],
    cost: &dyn Cost,
    system: &LdsSystem,
    grid: &[DMatrix<f64>],
) -> Result<(DMatrix<f64>, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, k) in grid.iter().enumerate() {
        let mut c = linear_rollout_cost(system, k, disturbances, cost)?;
        if c.is_nan() {
            c = f64::INFINITY;
        }
        if best.is_none_or(|(_, b)| c < b) {
            best = Some((i, c));
        }
    }
    let (i, c) = best.ok_or(ControlError::EmptyCandidates)?;
    Ok((grid[i].clone(), c))
}

/// Scalar gains with `|a − bK| ≤ 1 − γ` and `|K| ≤ κ`, evenly spaced.
pub fn scalar_gain_grid(system: &LdsSystem, kappa: f64, gamma: f64, n: usize) -> Result<Vec<DMatrix<f64>>> {
    if system.state_dim() != 1 || system.input_dim() != 1 {
        return Err(ControlError::InvalidParameter {
            name: "grid",
            reason: "scalar gain grid needs a scalar system".into(),
        });
    }
    let (a, b) = (system.a()[(0, 0)], system.b()[(0, 0)]);
    if b == 0.0 || n == 0 {
        return Err(ControlError::EmptyCandidates);
    }
    let (k1, k2) = ((a - (1.0 - gamma)) / b, (a + (1.0 - gamma)) / b);
    let lo = k1.min(k2).max(-kappa);
    let hi = k1.max(k2).min(kappa);
    if lo > hi {
        return Err(ControlError::EmptyCandidates);
    }
    Ok((0..n)
        .map(|i| {
            let s = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            DMatrix::from_element(1, 1, lo + s * (hi - lo))
        })
        .collect())
}

/// Online Newton Step on the fixed loss `(δx − 1)²`, `δ = 1/√T`, over `[−1, 1]`.
#[derive(Debug, Clone)]
pub struct OnsCounterexample {
    pub points: Vec<f64>,
    pub losses: Vec<f64>,
    pub movements: Vec<f64>,
    pub best_point: f64,
    pub best_loss: f64,
}

impl OnsCounterexample {
    pub fn regret(&self) -> f64 {
        self.losses.iter().sum::<f64>() - self.best_loss * self.losses.len() as f64
    }
    pub fn regret_series(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.losses
            .iter()
            .map(|l| {
                acc += l - self.best_loss;
                acc
            })
            .collect()
    }
}

pub fn run_ons_counterexample(horizon: usize, delta: f64) -> Result<OnsCounterexample> {
    let cost = make_counterexample_cost(horizon, 1)?;
    let dom = OnsDomain::Box(BoxSet::interval(-1.0, 1.0)?);
    let mut state = OnsState::new(DVector::zeros(1), delta, dom)?;
    let none = DVector::zeros(1);
    let hess = cost.q.clone() * 2.0;
    let (mut points, mut losses, mut movements) = (Vec::new(), Vec::new(), Vec::new());
    for t in 0..horizon {
        let x = state.point().clone();
        losses.push(cost.eval(t, &x, &none));
        points.push(x[0]);
        let g = cost.grad_x(t, &x, &none);
        movements.push(state.step(&g, &hess)?);
    }
    let d = 1.0 / (horizon as f64).sqrt();
    let best_point = (1.0 / d).clamp(-1.0, 1.0);
    let best_loss = cost.eval(0, &DVector::from_element(1, best_point), &none);
    Ok(OnsCounterexample {
        points,
        losses,
        movements,
        best_point,
        best_loss,
    })
}
