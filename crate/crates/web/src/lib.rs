//! Browser bindings for three small experiments on a scalar plant
//! `x' = 0.9x + u + w` stabilized by `K = 0.5`.
//!
//! Each export has a plain Rust counterpart so the numerics are testable
//! natively; the `#[wasm_bindgen]` wrappers only convert errors.

use std::sync::Arc;

use nalgebra::DMatrix;
use online_control::controller::{
    best_policy_in_hindsight, diagonal_costs, regret_series, run_gpc, run_ons_counterexample, EtaRule, GpcConfig,
};
use online_control::lds::{make_quadratic_cost, DisturbanceGenerator, DisturbanceKind, LdsSystem};
use online_control::policy::StabilizingController;
use online_control::transfer::TransferCache;
use wasm_bindgen::prelude::*;

/// Longest horizon the page accepts; keeps a click under a second or two.
pub const MAX_HORIZON: usize = 20_000;

fn scalar_config(kind: DisturbanceKind, gamma: f64, horizon: usize, seed: u64) -> Result<GpcConfig, String> {
    if !(2..=MAX_HORIZON).contains(&horizon) {
        return Err(format!("horizon must be between 2 and {MAX_HORIZON}"));
    }
    let e = |err: online_control::error::ControlError| err.to_string();
    let one = DMatrix::from_element(1, 1, 1.0);
    let sys = LdsSystem::with_tight_bounds(DMatrix::from_element(1, 1, 0.9), one.clone(), 1.0).map_err(e)?;
    // |0.9 − 0.5| = 0.4, so any γ ≤ 0.6 is certified with κ = 1.
    if !(gamma > 0.0 && gamma <= 0.6) {
        return Err("gamma must lie in (0, 0.6] for this plant".into());
    }
    let ctrl = StabilizingController::new(DMatrix::from_element(1, 1, 0.5), 1.0, gamma).map_err(e)?;
    let cost = Arc::new(make_quadratic_cost(one.clone(), one).map_err(e)?);
    let gen = DisturbanceGenerator::new(kind, 1, 1.0, seed).map_err(e)?;
    Ok(GpcConfig::new(sys, ctrl, cost, gen, horizon))
}

fn disturbance(name: &str, period: f64) -> Result<DisturbanceKind, String> {
    match name {
        "sinusoid" => Ok(DisturbanceKind::Sinusoidal { amplitude: 1.0, period }),
        "sign" => Ok(DisturbanceKind::SignAlternating { amplitude: 1.0 }),
        "gaussian" => Ok(DisturbanceKind::GaussianClipped { sigma: 0.5 }),
        other => Err(format!("unknown disturbance `{other}`")),
    }
}

/// Cumulative regret of the learner against the best fixed policy in hindsight.
pub fn regret_curve(kind: &str, period: f64, horizon: usize, seed: u64) -> Result<Vec<f64>, String> {
    let cfg = scalar_config(disturbance(kind, period)?, 0.6, horizon, seed)?
        .with_eta(EtaRule::MainTheorem { scale: 1.0 });
    let trace = run_gpc(&cfg).map_err(|e| e.to_string())?;
    let w = trace.disturbances();
    let best = best_policy_in_hindsight(&w, cfg.cost.as_ref(), &cfg.controller, &cfg.system, trace.h, &cfg.radii())
        .map_err(|e| e.to_string())?;
    let cache = TransferCache::new(&cfg.system, &cfg.controller, trace.h).map_err(|e| e.to_string())?;
    let best_costs = diagonal_costs(cfg.cost.as_ref(), &cache, &w, &best.policy).map_err(|e| e.to_string())?;
    regret_series(&trace, &best_costs).map_err(|e| e.to_string())
}

/// Mean `|c_t − f_t|` for `H = 1..=h_max` on a sinusoidal disturbance.
pub fn memory_gaps(gamma: f64, horizon: usize, h_max: usize) -> Result<Vec<f64>, String> {
    if !(1..=40).contains(&h_max) {
        return Err("h_max must be between 1 and 40".into());
    }
    let base = scalar_config(disturbance("sinusoid", 100.0)?, gamma, horizon, 0)?;
    (1..=h_max)
        .map(|h| {
            let trace = run_gpc(&base.clone().with_memory(h)).map_err(|e| e.to_string())?;
            Ok(trace.mean_gap())
        })
        .collect()
}

/// Cumulative regret of ONS on `(x/√T − 1)²` over `[−1, 1]`.
pub fn ons_regret(horizon: usize, delta: f64) -> Result<Vec<f64>, String> {
    if !(2..=MAX_HORIZON * 10).contains(&horizon) {
        return Err(format!("horizon must be between 2 and {}", MAX_HORIZON * 10));
    }
    Ok(run_ons_counterexample(horizon, delta).map_err(|e| e.to_string())?.regret_series())
}

#[wasm_bindgen(js_name = regretCurve)]
pub fn regret_curve_js(kind: &str, period: f64, horizon: usize, seed: u32) -> Result<Vec<f64>, JsValue> {
    regret_curve(kind, period, horizon, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = memoryGaps)]
pub fn memory_gaps_js(gamma: f64, horizon: usize, h_max: usize) -> Result<Vec<f64>, JsValue> {
    memory_gaps(gamma, horizon, h_max).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = onsRegret)]
pub fn ons_regret_js(horizon: usize, delta: f64) -> Result<Vec<f64>, JsValue> {
    ons_regret(horizon, delta).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regret_curve_has_one_point_per_step() {
        let r = regret_curve("sinusoid", 50.0, 500, 1).unwrap();
        assert_eq!(r.len(), 500);
        assert!(r.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_period_and_unknown_kinds_are_errors() {
        assert!(regret_curve("sinusoid", 0.0, 100, 1).is_err());
        assert!(regret_curve("square", 10.0, 100, 1).is_err());
        assert!(regret_curve("sign", 10.0, MAX_HORIZON + 1, 1).is_err());
    }

    #[test]
    fn gaps_shrink_with_memory() {
        let g = memory_gaps(0.5, 2000, 8).unwrap();
        assert_eq!(g.len(), 8);
        assert!(g[7] < g[0]);
        assert!(memory_gaps(0.9, 2000, 8).is_err());
    }

    #[test]
    fn ons_regret_is_nonnegative_at_the_end() {
        let r = ons_regret(1000, 1e-4).unwrap();
        assert_eq!(r.len(), 1000);
        assert!(*r.last().unwrap() >= 0.0);
    }
}
