//! Property tests for the algebraic invariants.

use metagrad_core::meta::correlation;
use metagrad_core::{exact_value, generate_random_mdp, policy_probs, PolicyParams};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

proptest! {
    #[test]
    fn policy_rows_always_sum_to_one(entries in prop::collection::vec(-60.0f64..60.0, 12)) {
        let theta = PolicyParams::new(
            Array2::from_shape_vec((4, 3), entries).unwrap()
        ).unwrap();
        let probs = policy_probs(&theta);
        for s in 0..4 {
            let sum: f64 = probs.row(s).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(probs.row(s).iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn correlation_is_scale_invariant(
        xs in prop::collection::vec(-10.0f64..10.0, 6),
        ys in prop::collection::vec(-10.0f64..10.0, 6),
        a in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0],
        b in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0],
    ) {
        let x = Array1::from_vec(xs);
        let y = Array1::from_vec(ys);
        prop_assume!(x.dot(&x) > 1e-6 && y.dot(&y) > 1e-6);
        let base = correlation(&x, &y).unwrap();
        let scaled = correlation(&(&x * a), &(&y * b)).unwrap();
        let sign = (a * b).signum();
        prop_assert!((scaled - sign * base).abs() <= 1e-12);
    }

    #[test]
    fn value_is_invariant_to_logit_shift(seed in 0u64..50, shift in -5.0f64..5.0) {
        let mdp = generate_random_mdp(seed, 3, 2, 1.0, 5, 0.9).unwrap();
        let theta = PolicyParams::new(Array2::from_shape_fn((3, 2), |(s, a)| {
            ((seed as f64) * 0.1 + s as f64 - a as f64) * 0.3
        })).unwrap();
        let shifted = PolicyParams::new(&theta.theta + shift).unwrap();
        let v0 = exact_value(&mdp, &theta, None).unwrap();
        let v1 = exact_value(&mdp, &shifted, None).unwrap();
        prop_assert!((v0 - v1).abs() <= 1e-10 * v0.abs().max(1.0));
    }

    #[test]
    fn value_is_linear_in_reward(seed in 0u64..50, scale in -3.0f64..3.0) {
        let mdp = generate_random_mdp(seed, 3, 2, 1.0, 5, 0.9).unwrap();
        let theta = PolicyParams::zeros(3, 2);
        let phi = Array2::from_elem((3, 2), scale);
        let total = &mdp.reward + &phi;
        let v_sum = exact_value(&mdp, &theta, Some(&total)).unwrap();
        let v_r = exact_value(&mdp, &theta, None).unwrap();
        let v_phi = exact_value(&mdp, &theta, Some(&phi)).unwrap();
        prop_assert!((v_sum - (v_r + v_phi)).abs() <= 1e-10);
    }
}
