//! Finite-difference verification of every exact derivative: policy
//! gradient against the value, Hessian against the gradient, reward
//! Jacobian against reward-perturbed gradients, and the meta-gradient
//! against the end-to-end composed map.

use metagrad_core::gradcheck::{central_diff_grad, central_diff_rows, rel_error_inf};
use metagrad_core::meta::{
    exact_inner_loop, exact_meta_gradient, problem_for, InnerLoopConfig, MetaProblem, MetaVariant,
};
use metagrad_core::rng::rng_from_seed;
use metagrad_core::{
    exact_policy_gradient, exact_policy_hessian, exact_reward_jacobian, exact_value,
    generate_random_mdp, sample_trajectories, PolicyParams, TabularMdp,
};
use ndarray::{Array1, Array2};
use rand::Rng;

fn random_theta(seed: u64, n_states: usize, n_actions: usize, scale: f64) -> PolicyParams {
    let mut rng = rng_from_seed(seed);
    PolicyParams::new(Array2::from_shape_fn((n_states, n_actions), |_| {
        scale * (rng.random::<f64>() - 0.5)
    }))
    .unwrap()
}

fn unflatten(flat: &Array1<f64>, n_states: usize, n_actions: usize) -> PolicyParams {
    PolicyParams::new(
        Array2::from_shape_vec((n_states, n_actions), flat.to_vec()).unwrap(),
    )
    .unwrap()
}

#[test]
fn gradient_matches_finite_differences() {
    for i in 0..20u64 {
        let mdp = generate_random_mdp(100 + i, 5, 3, 1.0, 8, 0.9).unwrap();
        let theta = random_theta(200 + i, 5, 3, 2.0);
        let exact = exact_policy_gradient(&mdp, &theta, None).unwrap();
        let fd = central_diff_grad(
            |flat| {
                let t = unflatten(flat, 5, 3);
                exact_value(&mdp, &t, None).unwrap()
            },
            &theta.flat(),
            1e-5,
        );
        let err = rel_error_inf(fd.as_slice().unwrap(), exact.as_slice().unwrap());
        assert!(err <= 1e-6, "instance {i}: rel error {err}");
    }
}

#[test]
fn hessian_matches_finite_differences_of_gradient() {
    for i in 0..20u64 {
        let mdp = generate_random_mdp(300 + i, 5, 3, 1.0, 8, 0.9).unwrap();
        let theta = random_theta(400 + i, 5, 3, 2.0);
        let exact = exact_policy_hessian(&mdp, &theta, None).unwrap();
        // Row p of the FD result is d(grad)/d theta_p, i.e. the p-th row of
        // the (symmetric) Hessian.
        let fd = central_diff_rows(
            |flat| {
                let t = unflatten(flat, 5, 3);
                exact_policy_gradient(&mdp, &t, None).unwrap()
            },
            &theta.flat(),
            1e-5,
        );
        let err = rel_error_inf(fd.as_slice().unwrap(), exact.as_slice().unwrap());
        assert!(err <= 1e-5, "instance {i}: rel error {err}");
    }
}

#[test]
fn reward_jacobian_matches_finite_differences_over_rewards() {
    for i in 0..20u64 {
        let mdp = generate_random_mdp(500 + i, 4, 3, 1.0, 6, 0.85).unwrap();
        let theta = random_theta(600 + i, 4, 3, 1.5);
        let exact = exact_reward_jacobian(&mdp, &theta, None).unwrap();
        // Perturb the reward override entrywise: row (s,a) of the Jacobian
        // is d(grad)/d phi_(s,a).
        let base: Array1<f64> = Array1::from_iter(mdp.reward.iter().copied());
        let fd = central_diff_rows(
            |flat| {
                let r = Array2::from_shape_vec((4, 3), flat.to_vec()).unwrap();
                exact_policy_gradient(&mdp, &theta, Some(&r)).unwrap()
            },
            &base,
            1e-5,
        );
        let err = rel_error_inf(fd.as_slice().unwrap(), exact.as_slice().unwrap());
        assert!(err <= 1e-6, "instance {i}: rel error {err}");
    }
}

#[test]
fn hessian_jacobian_invariant_under_reward_override_shift() {
    // The mixed derivative is constant in phi (value is linear in reward).
    let mdp = generate_random_mdp(700, 4, 2, 1.0, 6, 0.9).unwrap();
    let theta = random_theta(701, 4, 2, 1.0);
    let j0 = exact_reward_jacobian(&mdp, &theta, None).unwrap();
    let half = Array2::from_elem((4, 2), 0.5);
    let shifted = &mdp.reward + &half;
    let j1 = exact_reward_jacobian(&mdp, &theta, Some(&shifted)).unwrap();
    assert_eq!(j0, j1);
}

fn end_to_end_value(problem: &MetaProblem, config: &InnerLoopConfig) -> f64 {
    let iterates = exact_inner_loop(problem, config).unwrap();
    exact_value(&problem.mdp, iterates.last().unwrap(), None).unwrap()
}

#[test]
fn meta_gradient_matches_end_to_end_finite_differences() {
    let ks = [1usize, 3, 5];
    let alphas = [0.5, 1.0, 2.0];
    for i in 0..20u64 {
        let variant = if i % 2 == 0 {
            MetaVariant::Maml
        } else {
            MetaVariant::Lirpg
        };
        let k = ks[(i as usize / 2) % 3];
        let alpha = alphas[(i as usize / 6) % 3];
        let mdp = generate_random_mdp(800 + i, 4, 3, 1.0, 6, 0.85).unwrap();
        let problem = problem_for(variant, mdp).unwrap();
        let config = InnerLoopConfig::new(k, alpha);
        let exact = exact_meta_gradient(&problem, &config).unwrap();
        let fd = match variant {
            MetaVariant::Maml => central_diff_grad(
                |flat| {
                    let mut p = problem.clone();
                    p.theta0 = unflatten(flat, 4, 3);
                    p.meta_params = p.theta0.theta.clone();
                    end_to_end_value(&p, &config)
                },
                &problem.theta0.flat(),
                1e-5,
            ),
            MetaVariant::Lirpg => central_diff_grad(
                |flat| {
                    let mut p = problem.clone();
                    p.meta_params = Array2::from_shape_vec((4, 3), flat.to_vec()).unwrap();
                    end_to_end_value(&p, &config)
                },
                &Array1::from_iter(problem.meta_params.iter().copied()),
                1e-5,
            ),
        };
        let err = rel_error_inf(fd.as_slice().unwrap(), exact.as_slice().unwrap());
        assert!(
            err <= 1e-5,
            "instance {i} ({variant:?}, K={k}, alpha={alpha}): rel error {err}"
        );
    }
}

#[test]
fn value_matches_monte_carlo_mean_return() {
    let mdp = generate_random_mdp(900, 4, 2, 1.0, 5, 0.9).unwrap();
    let theta = random_theta(901, 4, 2, 1.0);
    let exact = exact_value(&mdp, &theta, None).unwrap();
    let n = 1_000_000usize;
    let trajs = sample_trajectories(&mdp, &theta, n, 902);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for t in &trajs {
        let ret: f64 = t
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| mdp.discount.powi(i as i32) * s.reward)
            .sum();
        sum += ret;
        sum_sq += ret * ret;
    }
    let mean = sum / n as f64;
    let var = sum_sq / n as f64 - mean * mean;
    let se = (var / n as f64).sqrt();
    assert!(
        (mean - exact).abs() <= 3.0 * se,
        "MC mean {mean} vs exact {exact} (se {se})"
    );
}

#[test]
fn value_and_gradient_are_shift_invariant() {
    let mdp = generate_random_mdp(903, 4, 3, 1.0, 6, 0.9).unwrap();
    let theta = random_theta(904, 4, 3, 1.0);
    let shifted = PolicyParams::new(&theta.theta + 3.7).unwrap();
    let v0 = exact_value(&mdp, &theta, None).unwrap();
    let v1 = exact_value(&mdp, &shifted, None).unwrap();
    assert!((v0 - v1).abs() <= 1e-12 * v0.abs().max(1.0));
    let g0 = exact_policy_gradient(&mdp, &theta, None).unwrap();
    let g1 = exact_policy_gradient(&mdp, &shifted, None).unwrap();
    let err = rel_error_inf(g1.as_slice().unwrap(), g0.as_slice().unwrap());
    assert!(err <= 1e-12, "gradient shift error {err}");
}

#[allow(dead_code)]
fn silence_unused(_: &TabularMdp) {}
