mod common;

use common::*;
use nalgebra::DMatrix;
use online_control::controller::{best_linear_in_hindsight, best_policy_in_hindsight, linear_rollout_cost};
use online_control::harness::parse_spec;

#[test]
fn restarts_agree_on_packaged_instances() {
    for name in ["scalar_sinusoid", "twodim_gaussian", "sufficiency_check"] {
        let spec = parse_spec(specs_dir().join(format!("{name}.json"))).unwrap();
        let c = spec.control().unwrap();
        let t = spec.horizons[0];
        let cfg = c.config(t, spec.seed).unwrap();
        let w = cfg.disturbance.stream(t).unwrap();
        let best =
            best_policy_in_hindsight(&w, cfg.cost.as_ref(), &c.controller, &c.system, cfg.memory_length(), &cfg.radii())
                .unwrap();
        assert!(best.restart_spread() <= 1e-6, "{name}: spread {}", best.restart_spread());
        assert!(best.policy.is_feasible());
    }
}

/// Scalar system with `H = 1`: the policy is a single number, so a fine grid
/// over `[−r, r]` with the reference rollout is an exact-enough oracle.
#[test]
fn scalar_solver_matches_grid_search() {
    let spec = parse_spec(specs_dir().join("scalar_sinusoid.json")).unwrap();
    let mut c = spec.control().unwrap().clone();
    c.memory = Some(1);
    let t = 600;
    let cfg = c.config(t, spec.seed).unwrap();
    let w = cfg.disturbance.stream(t).unwrap();
    let r = cfg.radii()[0];
    let best = best_policy_in_hindsight(&w, cfg.cost.as_ref(), &c.controller, &c.system, 1, &[r]).unwrap();
    let id = DMatrix::identity(1, 1);
    let total = |m: f64| -> f64 {
        let blocks = [DMatrix::from_element(1, 1, m)];
        (0..t)
            .map(|s| {
                let (y, v) = ideal_pair(c.system.a(), c.system.b(), c.controller.k(), &blocks, &w, s);
                quad(&id, &id, &y, &v)
            })
            .sum()
    };
    let n = 2000;
    let step = 2.0 * r / n as f64;
    let (grid_m, grid_val) = (0..=n)
        .map(|i| -r + i as f64 * step)
        .map(|m| (m, total(m)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let m = best.policy.block(1)[(0, 0)];
    assert!((m - grid_m).abs() <= step, "solver {m} vs grid {grid_m}");
    assert!(best.total_cost <= grid_val + 1e-9 * grid_val);
    assert!((total(m) - best.total_cost).abs() <= 1e-9 * best.total_cost);
}

#[test]
fn best_gain_on_grid_is_the_grid_minimum() {
    let spec = parse_spec(specs_dir().join("scalar_sinusoid.json")).unwrap();
    let c = spec.control().unwrap();
    let t = 400;
    let cfg = c.config(t, spec.seed).unwrap();
    let w = cfg.disturbance.stream(t).unwrap();
    let grid: Vec<DMatrix<f64>> = (0..=20).map(|i| DMatrix::from_element(1, 1, 0.05 * i as f64)).collect();
    let (k, cost) = best_linear_in_hindsight(&w, cfg.cost.as_ref(), &c.system, &grid).unwrap();
    // Reference: u = −Kx stepped by hand.
    let reference = |g: f64| {
        let (a, b) = (c.system.a()[(0, 0)], c.system.b()[(0, 0)]);
        let mut x = 0.0;
        let mut total = 0.0;
        for wt in &w {
            let u = -g * x;
            total += x * x + u * u;
            x = a * x + b * u + wt[0];
        }
        total
    };
    let min = grid.iter().map(|g| reference(g[(0, 0)])).fold(f64::INFINITY, f64::min);
    assert!((cost - min).abs() <= 1e-9 * min);
    assert!((reference(k[(0, 0)]) - cost).abs() <= 1e-9 * min);
    let direct = linear_rollout_cost(&c.system, &k, &w, cfg.cost.as_ref()).unwrap();
    assert!((direct - cost).abs() <= 1e-9 * min);
}
