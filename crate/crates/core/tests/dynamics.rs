mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use online_control::lds::{
    make_counterexample_cost, make_quadratic_cost, read_replay_csv, write_replay_csv, Cost, DisturbanceGenerator,
    DisturbanceKind, LdsSystem,
};
use online_control::linalg::clip_norm;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn step_then_recover_round_trips() {
    let mut rng = rng(11);
    for _ in 0..1000 {
        let dx = rng.random_range(1..=6);
        let du = rng.random_range(1..=6);
        let sys = LdsSystem::with_tight_bounds(uniform_matrix(&mut rng, dx, dx), uniform_matrix(&mut rng, dx, du), 1.0)
            .unwrap();
        let x = uniform_vec(&mut rng, dx) * 10.0;
        let u = uniform_vec(&mut rng, du) * 10.0;
        let mut w = uniform_vec(&mut rng, dx);
        clip_norm(&mut w, 1.0);
        let next = sys.step(&x, &u, &w).unwrap();
        assert!((&next - (sys.a() * &x + sys.b() * &u + &w)).amax() <= 1e-12);
        let back = sys.recover_disturbance(&next, &x, &u).unwrap();
        assert!((back - w).amax() <= 1e-12);
    }
}

#[test]
fn dimension_mismatches_are_rejected() {
    let sys = LdsSystem::with_tight_bounds(DMatrix::identity(2, 2), DMatrix::identity(2, 1), 1.0).unwrap();
    let bad = sys.step(&DVector::zeros(3), &DVector::zeros(1), &DVector::zeros(2));
    assert!(bad.is_err());
    assert!(LdsSystem::with_tight_bounds(DMatrix::identity(2, 2), DMatrix::identity(3, 1), 1.0).is_err());
}

fn kinds() -> Vec<DisturbanceKind> {
    vec![
        DisturbanceKind::Zero,
        DisturbanceKind::Constant(DVector::from_element(3, 2.0)),
        DisturbanceKind::GaussianClipped { sigma: 3.0 },
        DisturbanceKind::Uniform { half_width: 4.0 },
        DisturbanceKind::Sinusoidal {
            amplitude: 5.0,
            period: 7.0,
        },
        DisturbanceKind::SignAlternating { amplitude: 9.0 },
    ]
}

proptest! {
    #[test]
    fn every_kind_respects_the_bound(seed in any::<u64>(), t in 0usize..10_000, w in 0.1f64..3.0) {
        for kind in kinds() {
            let g = DisturbanceGenerator::new(kind, 3, w, seed).unwrap();
            prop_assert!(g.emit(t).unwrap().norm() <= w * (1.0 + 1e-12));
        }
    }

    #[test]
    fn emission_depends_only_on_seed_and_time(seed in any::<u64>(), t in 0usize..500) {
        for kind in kinds() {
            let g = DisturbanceGenerator::new(kind, 3, 1.0, seed).unwrap();
            let again = g.clone().emit(t).unwrap();
            prop_assert_eq!(g.emit(t).unwrap(), again);
            prop_assert_eq!(&g.stream(t + 1).unwrap()[t], &g.emit(t).unwrap());
        }
    }

    #[test]
    fn quadratic_gradients_match_differences(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let (dx, du) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let gq = uniform_matrix(&mut rng, dx, dx);
        let gr = uniform_matrix(&mut rng, du, du);
        let cost = make_quadratic_cost(&gq * gq.transpose(), &gr * gr.transpose()).unwrap();
        let (x, u) = (uniform_vec(&mut rng, dx), uniform_vec(&mut rng, du));
        let h = 1e-6;
        for k in 0..dx {
            let mut e = DVector::zeros(dx);
            e[k] = h;
            let fd = (cost.eval(0, &(&x + &e), &u) - cost.eval(0, &(&x - &e), &u)) / (2.0 * h);
            prop_assert!((cost.grad_x(0, &x, &u)[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
        for k in 0..du {
            let mut e = DVector::zeros(du);
            e[k] = h;
            let fd = (cost.eval(0, &x, &(&u + &e)) - cost.eval(0, &x, &(&u - &e))) / (2.0 * h);
            prop_assert!((cost.grad_u(0, &x, &u)[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn quadratic_cost_is_midpoint_convex(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let gq = uniform_matrix(&mut rng, 3, 3);
        let cost = make_quadratic_cost(&gq * gq.transpose(), DMatrix::identity(2, 2)).unwrap();
        let (x1, x2) = (uniform_vec(&mut rng, 3), uniform_vec(&mut rng, 3));
        let (u1, u2) = (uniform_vec(&mut rng, 2), uniform_vec(&mut rng, 2));
        let mid = cost.eval(0, &((&x1 + &x2) / 2.0), &((&u1 + &u2) / 2.0));
        let avg = (cost.eval(0, &x1, &u1) + cost.eval(0, &x2, &u2)) / 2.0;
        prop_assert!(mid <= avg + 1e-12);
    }
}

#[test]
fn gaussian_streams_differ_across_seeds() {
    let a = DisturbanceGenerator::new(DisturbanceKind::GaussianClipped { sigma: 0.5 }, 2, 1.0, 1).unwrap();
    let b = a.with_seed(2);
    assert_ne!(a.stream(20).unwrap(), b.stream(20).unwrap());
}

#[test]
fn indefinite_weights_are_rejected() {
    let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
    assert!(make_quadratic_cost(q, DMatrix::identity(1, 1)).is_err());
    let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
    assert!(make_quadratic_cost(asym, DMatrix::identity(1, 1)).is_err());
}

#[test]
fn counterexample_cost_values() {
    let cost = make_counterexample_cost(4, 1).unwrap();
    let u = DVector::from_element(1, 123.0);
    // δ = 1/2: (x/2 − 1)².
    for x in [-1.0, 0.0, 1.0, 2.0] {
        let v = cost.eval(0, &DVector::from_element(1, x), &u);
        assert!((v - (x / 2.0 - 1.0_f64).powi(2)).abs() < 1e-15);
    }
    assert_eq!(cost.grad_u(0, &DVector::zeros(1), &u), DVector::zeros(1));
}

#[test]
fn replay_csv_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.csv");
    let g = DisturbanceGenerator::new(DisturbanceKind::GaussianClipped { sigma: 0.7 }, 3, 1.0, 5).unwrap();
    let rows = g.stream(50).unwrap();
    write_replay_csv(&path, &rows).unwrap();
    let back = read_replay_csv(&path).unwrap();
    assert_eq!(back, rows);
    let replay = DisturbanceGenerator::new(DisturbanceKind::Replay(back), 3, 1.0, 0).unwrap();
    assert_eq!(replay.stream(50).unwrap(), rows);
    assert!(replay.emit(50).is_err());
}

#[test]
fn replay_csv_rejects_bad_headers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.csv");
    std::fs::write(&path, "a,b\n1,2\n").unwrap();
    assert!(read_replay_csv(&path).is_err());
}
