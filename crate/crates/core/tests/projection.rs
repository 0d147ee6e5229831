mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use online_control::oco::{ConvexSet, SpectralBallProduct};
use online_control::policy::{project_policy, DisturbancePolicy};
use proptest::prelude::*;
use rand::Rng;

fn svd_clip(m: &DMatrix<f64>, r: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let s = svd.singular_values.map(|x| x.min(r));
    svd.u.unwrap() * DMatrix::from_diagonal(&s) * svd.v_t.unwrap()
}

fn random_overshooting_policy(seed: u64) -> DisturbancePolicy {
    let mut rng = rng(seed);
    let (du, dx, h) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=6));
    let radii: Vec<f64> = (0..h).map(|i| 2.0 * 0.8_f64.powi(i)).collect();
    let blocks = radii
        .iter()
        .map(|r| {
            let scale = r * rng.random_range(0.1..4.0);
            with_norm(uniform_matrix(&mut rng, du, dx), scale)
        })
        .collect();
    DisturbancePolicy::new(blocks, radii).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn projection_is_feasible_idempotent_and_local(seed in any::<u64>()) {
        let p = random_overshooting_policy(seed);
        let proj = project_policy(&p).unwrap();
        let again = project_policy(&proj).unwrap();
        prop_assert!(proj.approx_eq(&again, 1e-12));
        for (i, ((orig, out), r)) in p.blocks().iter().zip(proj.blocks()).zip(p.radii()).enumerate() {
            prop_assert!(svd_norm(out) <= r * (1.0 + 1e-9), "block {} infeasible", i);
            if svd_norm(orig) <= *r {
                prop_assert_eq!(orig, out);
            }
            prop_assert!((out - svd_clip(orig, *r)).amax() <= 1e-9);
        }
    }
}

#[test]
fn scalar_blocks_clip_exactly() {
    for (m, r, expect) in [(2.5, 1.0, 1.0), (-2.5, 1.0, -1.0), (0.3, 1.0, 0.3), (-0.7, 0.5, -0.5)] {
        let p = DisturbancePolicy::new(vec![DMatrix::from_element(1, 1, m)], vec![r]).unwrap();
        assert_eq!(project_policy(&p).unwrap().block(1)[(0, 0)], expect);
    }
}

#[test]
fn diagonal_blocks_clip_entrywise() {
    let d = DVector::from_vec(vec![3.0, -0.2, -1.5]);
    let p = DisturbancePolicy::new(vec![DMatrix::from_diagonal(&d)], vec![1.0]).unwrap();
    let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.2, -1.0]));
    assert!((project_policy(&p).unwrap().block(1) - expect).amax() <= 1e-12);
}

#[test]
fn projection_is_closest_among_feasible_candidates() {
    let mut rng = rng(31);
    for _ in 0..50 {
        let r = rng.random_range(0.5..2.0);
        let m = with_norm(uniform_matrix(&mut rng, 3, 3), r * rng.random_range(1.0..4.0));
        let p = DisturbancePolicy::new(vec![m.clone()], vec![r]).unwrap();
        let proj = project_policy(&p).unwrap().block(1).clone();
        let dist = (&m - &proj).norm();
        for _ in 0..100 {
            let cand = with_norm(uniform_matrix(&mut rng, 3, 3), r * rng.random::<f64>());
            assert!((&m - cand).norm() >= dist - 1e-12);
        }
    }
}

#[test]
fn flat_set_projection_agrees_with_policy_projection() {
    let p = random_overshooting_policy(7);
    let set = SpectralBallProduct::from_policy(&p);
    let flat = set.project(&p.flatten()).unwrap();
    assert!(set.contains(&flat, 1e-9));
    let direct = project_policy(&p).unwrap();
    assert!((flat - direct.flatten()).amax() <= 1e-12);
}
