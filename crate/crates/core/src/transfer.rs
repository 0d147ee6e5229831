//! Disturbance-to-state transfer matrices and the idealized (truncated) state,
//! action and cost that turn control into online learning with memory.
//!
//! Index conventions: a window anchored at cost time `t` holds the policies
//! `M_{t−H−1} … M_t` and the disturbances `w_{t−1} … w_{t−1−2H}`. Everything
//! before time zero is zero.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, ControlError, Result};
use crate::lds::{Cost, DisturbanceBuffer, LdsSystem};
use crate::linalg::matrix_powers;
use crate::policy::{DisturbancePolicy, StabilizingController};

/// `Ã^j` for `j ≤ 2H + 1` and `Ã^j B` for `j ≤ 2H`, with `Ã = A − BK`.
#[derive(Debug, Clone)]
pub struct TransferCache {
    h: usize,
    k: DMatrix<f64>,
    closed_powers: Vec<DMatrix<f64>>,
    closed_powers_b: Vec<DMatrix<f64>>,
}

impl TransferCache {
    pub fn new(sys: &LdsSystem, ctrl: &StabilizingController, h: usize) -> Result<Self> {
        if h == 0 {
            return Err(ControlError::InvalidParameter {
                name: "H",
                reason: "must be at least 1".into(),
            });
        }
        let closed = sys.closed_loop(ctrl.k())?;
        let closed_powers = matrix_powers(&closed, 2 * h + 1);
        let closed_powers_b = closed_powers[..=2 * h].iter().map(|p| p * sys.b()).collect();
        Ok(Self {
            h,
            k: ctrl.k().clone(),
            closed_powers,
            closed_powers_b,
        })
    }

    pub fn h(&self) -> usize {
        self.h
    }
    pub fn state_dim(&self) -> usize {
        self.k.ncols()
    }
    pub fn input_dim(&self) -> usize {
        self.k.nrows()
    }
    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }
    /// `Ã^j`, `j ≤ 2H + 1`.
    pub fn closed_power(&self, j: usize) -> &DMatrix<f64> {
        &self.closed_powers[j]
    }
    /// `Ã^j B`, `j ≤ 2H`.
    pub fn closed_power_b(&self, j: usize) -> &DMatrix<f64> {
        &self.closed_powers_b[j]
    }
    pub fn num_params(&self) -> usize {
        self.h * self.input_dim() * self.state_dim()
    }
}

/// `Ψ_{t,i}`: the map from `w_{t−i}` to `x_{t+1}` inside a window.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    pub value: DMatrix<f64>,
    pub lag: usize,
    pub h: usize,
}

/// `Ψ_{t,i} = Ã^i·1{i ≤ H} + Σ_{j=0}^{H} Ã^j B M_{t−j}^[i−j]·1{i−j ∈ [1,H]}`.
///
/// `policies` is `M_{t−H} … M_t` (length `H + 1`, oldest first). The `j = 0`
/// term carries the policy played at `t` itself: `u_t` acts on `x_{t+1}`
/// without passing through `Ã`.
pub fn transfer_matrix(
    cache: &TransferCache,
    policies: &[&DisturbancePolicy],
    lag: usize,
) -> Result<TransferMatrix> {
    let h = cache.h;
    check_dim("transfer window", h + 1, policies.len())?;
    if lag > 2 * h {
        return Err(ControlError::InvalidParameter {
            name: "lag",
            reason: format!("must be ≤ 2H = {}, got {lag}", 2 * h),
        });
    }
    let n = cache.state_dim();
    let mut value = if lag <= h {
        cache.closed_powers[lag].clone()
    } else {
        DMatrix::zeros(n, n)
    };
    for j in 0..=h.min(lag) {
        let block = lag - j;
        if (1..=h).contains(&block) {
            let m = policies[h - j];
            value.gemm(1.0, &cache.closed_powers_b[j], m.block(block), 1.0);
        }
    }
    Ok(TransferMatrix { value, lag, h })
}

/// The coefficient of `w_{t−i}` in `x_{t+1}` for an arbitrary played history
/// `history = [M_0, …, M_t]`, without truncation: `x_{t+1} = Σ_{i=0}^{t} Φ_i w_{t−i}`.
pub fn untruncated_transfer_matrix(
    sys: &LdsSystem,
    ctrl: &StabilizingController,
    history: &[DisturbancePolicy],
    lag: usize,
) -> Result<DMatrix<f64>> {
    let t = history.len().checked_sub(1).ok_or(ControlError::InvalidParameter {
        name: "history",
        reason: "needs at least one policy".into(),
    })?;
    let closed = sys.closed_loop(ctrl.k())?;
    let powers = matrix_powers(&closed, lag);
    let mut value = powers[lag].clone();
    for k in 0..lag.min(t + 1) {
        let m = &history[t - k];
        let block = lag - k;
        if (1..=m.h()).contains(&block) {
            value += &powers[k] * sys.b() * m.block(block);
        }
    }
    Ok(value)
}

/// Arguments of the idealized cost at time `t`.
#[derive(Debug, Clone)]
pub struct IdealWindow {
    /// `M_{t−H−1} … M_t`, length `H + 2`.
    pub policies: Vec<DisturbancePolicy>,
    /// `w_{t−1} … w_{t−1−2H}`, length `2H + 1`; entry `i` is `w_{t−1−i}`.
    pub disturbances: Vec<DVector<f64>>,
}

impl IdealWindow {
    /// Window at `t = buf.now()` with the given policy history (oldest first).
    pub fn from_buffer(policies: Vec<DisturbancePolicy>, buf: &DisturbanceBuffer) -> Result<Self> {
        let h = policies.len().checked_sub(2).ok_or(ControlError::InvalidParameter {
            name: "policies",
            reason: "window needs H + 2 policies".into(),
        })?;
        let disturbances = (0..=2 * h)
            .map(|i| buf.lag(i + 1).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            policies,
            disturbances,
        })
    }

    /// Same policy in every slot, the argument of `g_t(M) = f_t(M, …, M)`.
    pub fn diagonal(policy: &DisturbancePolicy, buf: &DisturbanceBuffer) -> Result<Self> {
        Self::from_buffer(vec![policy.clone(); policy.h() + 2], buf)
    }

    pub fn h(&self) -> usize {
        self.policies.len() - 2
    }

    pub fn current(&self) -> &DisturbancePolicy {
        self.policies.last().expect("window is non-empty")
    }
}

/// `y_t = Σ_{i=0}^{2H} Ψ_{t−1,i}(M_{t−1−H} … M_{t−1}) w_{t−1−i}`: the state
/// reached from zero at `t−1−H` under the window's policies.
pub fn ideal_state(cache: &TransferCache, window: &IdealWindow) -> Result<DVector<f64>> {
    let h = cache.h;
    check_dim("window policies", h + 2, window.policies.len())?;
    check_dim("window disturbances", 2 * h + 1, window.disturbances.len())?;
    let slots: Vec<&DisturbancePolicy> = window.policies[..=h].iter().collect();
    let mut y = DVector::zeros(cache.state_dim());
    for (i, w) in window.disturbances.iter().enumerate() {
        let psi = transfer_matrix(cache, &slots, i)?;
        y.gemv(1.0, &psi.value, w, 1.0);
    }
    Ok(y)
}

/// `v_t = −K y + Σ_{i=1}^{H} M_t^[i] w_{t−i}`; `recent[i−1] = w_{t−i}`.
pub fn ideal_action(
    k: &DMatrix<f64>,
    current: &DisturbancePolicy,
    y: &DVector<f64>,
    recent: &[DVector<f64>],
) -> Result<DVector<f64>> {
    check_dim("recent disturbances", current.h(), recent.len().min(current.h()))?;
    let mut v = -(k * y);
    for (m, w) in current.blocks().iter().zip(recent) {
        v.gemv(1.0, m, w, 1.0);
    }
    Ok(v)
}

/// `f_t = c_t(y_t, v_t)` on the window.
pub fn ideal_cost(cost: &dyn Cost, t: usize, cache: &TransferCache, window: &IdealWindow) -> Result<f64> {
    let y = ideal_state(cache, window)?;
    let v = ideal_action(cache.k(), window.current(), &y, &window.disturbances)?;
    Ok(cost.eval(t, &y, &v))
}

/// The affine map `m ↦ (y_t, v_t)` of `g_t` in the flattened policy `m`:
/// `[y; v] = offset + jacobian · m`.
#[derive(Debug, Clone)]
pub struct DiagonalJacobian {
    pub offset: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    state_dim: usize,
}

impl DiagonalJacobian {
    /// `disturbances[i] = w_{t−1−i}`, `i = 0..=2H`.
    pub fn new(cache: &TransferCache, disturbances: &[DVector<f64>]) -> Result<Self> {
        let h = cache.h;
        check_dim("jacobian disturbances", 2 * h + 1, disturbances.len())?;
        let (dx, du) = (cache.state_dim(), cache.input_dim());
        let per = du * dx;
        let p = h * per;
        let mut jy = DMatrix::zeros(dx, p);
        for r in 1..=h {
            for j in 0..=h {
                let w = &disturbances[j + r];
                let ab = &cache.closed_powers_b[j];
                for q in 0..dx {
                    let wq = w[q];
                    if wq == 0.0 {
                        continue;
                    }
                    for pi in 0..du {
                        let col = (r - 1) * per + pi * dx + q;
                        for row in 0..dx {
                            jy[(row, col)] += wq * ab[(row, pi)];
                        }
                    }
                }
            }
        }
        let mut jacobian = DMatrix::zeros(dx + du, p);
        jacobian.rows_mut(0, dx).copy_from(&jy);
        let mut jv = -(&cache.k * &jy);
        for r in 1..=h {
            let w = &disturbances[r - 1];
            for pi in 0..du {
                for q in 0..dx {
                    jv[(pi, (r - 1) * per + pi * dx + q)] += w[q];
                }
            }
        }
        jacobian.rows_mut(dx, du).copy_from(&jv);

        let mut y0 = DVector::zeros(dx);
        for (i, w) in disturbances.iter().take(h + 1).enumerate() {
            y0.gemv(1.0, &cache.closed_powers[i], w, 1.0);
        }
        let v0 = -(&cache.k * &y0);
        let mut offset = DVector::zeros(dx + du);
        offset.rows_mut(0, dx).copy_from(&y0);
        offset.rows_mut(dx, du).copy_from(&v0);
        Ok(Self {
            offset,
            jacobian,
            state_dim: dx,
        })
    }

    pub fn from_buffer(cache: &TransferCache, buf: &DisturbanceBuffer) -> Result<Self> {
        let d = (0..=2 * cache.h)
            .map(|i| buf.lag(i + 1).cloned())
            .collect::<Result<Vec<_>>>()?;
        Self::new(cache, &d)
    }

    /// `(y, v)` at flattened policy `m`.
    pub fn evaluate(&self, m: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let mut z = self.offset.clone();
        z.gemv(1.0, &self.jacobian, m, 1.0);
        let dx = self.state_dim;
        let du = z.len() - dx;
        (z.rows(0, dx).into_owned(), z.rows(dx, du).into_owned())
    }

    /// `(g_t(m), ∇g_t(m))`.
    pub fn value_and_gradient(&self, cost: &dyn Cost, t: usize, m: &DVector<f64>) -> (f64, DVector<f64>) {
        let (y, v) = self.evaluate(m);
        let gx = cost.grad_x(t, &y, &v);
        let gu = cost.grad_u(t, &y, &v);
        let mut g = DVector::zeros(gx.len() + gu.len());
        g.rows_mut(0, gx.len()).copy_from(&gx);
        g.rows_mut(gx.len(), gu.len()).copy_from(&gu);
        (cost.eval(t, &y, &v), self.jacobian.tr_mul(&g))
    }
}

/// `∇_M g_t(M)` where `g_t(M) = f_t(M, …, M)` and `t = buf.now()`.
pub fn grad_ideal_cost_diagonal(
    cost: &dyn Cost,
    t: usize,
    policy: &DisturbancePolicy,
    buf: &DisturbanceBuffer,
    cache: &TransferCache,
) -> Result<DisturbancePolicy> {
    let jac = DiagonalJacobian::from_buffer(cache, buf)?;
    let (_, g) = jac.value_and_gradient(cost, t, &policy.flatten());
    DisturbancePolicy::from_flat(&g, policy.input_dim(), policy.state_dim(), policy.radii().to_vec())
}
