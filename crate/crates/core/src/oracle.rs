//! Brute-force ground truth by exhaustive trajectory enumeration.
//!
//! On tiny MDPs every positive-probability trajectory can be listed together
//! with its exact probability, so the expectation of any single-trajectory
//! estimator can be computed to machine precision. This is the independent
//! oracle the estimator test suites check against; it is never used in
//! measurement pipelines.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::mdp::{policy_probs, PolicyParams, Step, TabularMdp, Trajectory};

/// Path-count guard: enumeration refuses instances with more than this many
/// (action, next-state) branches.
pub const MAX_PATHS: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("enumeration would exceed {MAX_PATHS} paths")]
    TooManyPaths,
}

/// All positive-probability trajectories of an MDP under a fixed policy,
/// with their exact probabilities.
#[derive(Debug, Clone)]
pub struct EnumeratedTrajectorySet {
    pub trajectories: Vec<Trajectory>,
    pub probabilities: Vec<f64>,
}

impl EnumeratedTrajectorySet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Enumerates every trajectory with positive probability
/// rho(s0) * prod_t pi(a_t|s_t) P(s_{t+1}|s_t,a_t). The behavior log-prob
/// cache of each trajectory is filled under the enumerating policy, so
/// importance-weighted estimators can be driven from enumerated sets.
pub fn enumerate(
    mdp: &TabularMdp,
    theta: &PolicyParams,
) -> Result<EnumeratedTrajectorySet, OracleError> {
    let branching = (mdp.n_states * mdp.n_actions) as f64;
    if branching.powi(mdp.horizon as i32) > MAX_PATHS as f64 {
        return Err(OracleError::TooManyPaths);
    }
    let probs = policy_probs(theta);
    let mut set = EnumeratedTrajectorySet {
        trajectories: Vec::new(),
        probabilities: Vec::new(),
    };
    let mut steps = Vec::with_capacity(mdp.horizon);
    let mut log_probs = Vec::with_capacity(mdp.horizon);
    for s0 in 0..mdp.n_states {
        let p0 = mdp.initial_dist[s0];
        if p0 > 0.0 {
            extend(mdp, &probs, s0, p0, &mut steps, &mut log_probs, &mut set);
        }
    }
    Ok(set)
}

fn extend(
    mdp: &TabularMdp,
    probs: &Array2<f64>,
    state: usize,
    prob: f64,
    steps: &mut Vec<Step>,
    log_probs: &mut Vec<f64>,
    set: &mut EnumeratedTrajectorySet,
) {
    if steps.len() == mdp.horizon {
        set.trajectories.push(Trajectory {
            steps: steps.clone(),
            log_probs: Some(log_probs.clone()),
        });
        set.probabilities.push(prob);
        return;
    }
    let last = steps.len() + 1 == mdp.horizon;
    for a in 0..mdp.n_actions {
        let pa = probs[[state, a]];
        if pa == 0.0 {
            continue;
        }
        steps.push(Step {
            state,
            action: a,
            reward: mdp.reward[[state, a]],
        });
        log_probs.push(pa.ln());
        if last {
            // The final transition does not affect the trajectory of length
            // `horizon`; fold its probability mass (which sums to one).
            extend(mdp, probs, 0, prob * pa, steps, log_probs, set);
        } else {
            for s2 in 0..mdp.n_states {
                let pt = mdp.transition[[state, a, s2]];
                if pt == 0.0 {
                    continue;
                }
                extend(mdp, probs, s2, prob * pa * pt, steps, log_probs, set);
            }
        }
        steps.pop();
        log_probs.pop();
    }
}

/// Exact expectation of a scalar single-trajectory functional.
pub fn expected_scalar<F>(set: &EnumeratedTrajectorySet, mut f: F) -> f64
where
    F: FnMut(&Trajectory) -> f64,
{
    let mut acc = 0.0;
    for (traj, p) in set.trajectories.iter().zip(&set.probabilities) {
        acc += p * f(traj);
    }
    acc
}

/// Exact expectation of a vector-valued single-trajectory estimator.
pub fn expected_vector<F>(set: &EnumeratedTrajectorySet, dim: usize, mut f: F) -> Array1<f64>
where
    F: FnMut(&Trajectory) -> Array1<f64>,
{
    let mut acc = Array1::zeros(dim);
    for (traj, p) in set.trajectories.iter().zip(&set.probabilities) {
        acc.scaled_add(*p, &f(traj));
    }
    acc
}

/// Exact expectation of a matrix-valued single-trajectory estimator.
pub fn expected_matrix<F>(
    set: &EnumeratedTrajectorySet,
    dim: (usize, usize),
    mut f: F,
) -> Array2<f64>
where
    F: FnMut(&Trajectory) -> Array2<f64>,
{
    let mut acc = Array2::zeros(dim);
    for (traj, p) in set.trajectories.iter().zip(&set.probabilities) {
        acc.scaled_add(*p, &f(traj));
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{exact_value, generate_random_mdp, sample_trajectories};
    use ndarray::{arr2, Array3};

    #[test]
    fn deterministic_chain_has_one_trajectory() {
        let transition = Array3::from_shape_vec((2, 1, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let reward = arr2(&[[1.0], [0.0]]);
        let mdp = crate::mdp::TabularMdp::new(
            transition,
            reward,
            0.9,
            4,
            Array1::from_vec(vec![1.0, 0.0]),
        )
        .unwrap();
        let theta = PolicyParams::zeros(2, 1);
        let set = enumerate(&mdp, &theta).unwrap();
        assert_eq!(set.len(), 1);
        assert!((set.probabilities[0] - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn bandit_horizon_two_enumerates_four_paths() {
        let transition = Array3::from_shape_vec((1, 2, 1), vec![1.0, 1.0]).unwrap();
        let reward = arr2(&[[1.0, 0.0]]);
        let mdp = crate::mdp::TabularMdp::new(
            transition,
            reward,
            0.9,
            2,
            Array1::from_vec(vec![1.0]),
        )
        .unwrap();
        let theta = crate::mdp::PolicyParams::new(arr2(&[[0.4, -0.3]])).unwrap();
        let probs = policy_probs(&theta);
        let set = enumerate(&mdp, &theta).unwrap();
        assert_eq!(set.len(), 4);
        let total: f64 = set.probabilities.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
        for (traj, p) in set.trajectories.iter().zip(&set.probabilities) {
            let expect: f64 = traj
                .steps
                .iter()
                .map(|st| probs[[st.state, st.action]])
                .product();
            assert!((p - expect).abs() <= 1e-15);
        }
    }

    #[test]
    fn probabilities_sum_to_one_on_random_instance() {
        let mdp = generate_random_mdp(3, 3, 2, 1.0, 3, 0.9).unwrap();
        let theta = PolicyParams::zeros(3, 2);
        let set = enumerate(&mdp, &theta).unwrap();
        let total: f64 = set.probabilities.iter().sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn guard_rejects_explosions() {
        let mdp = generate_random_mdp(1, 10, 10, 1.0, 8, 0.9).unwrap();
        let theta = PolicyParams::zeros(10, 10);
        assert!(matches!(
            enumerate(&mdp, &theta),
            Err(OracleError::TooManyPaths)
        ));
    }

    #[test]
    fn expected_return_matches_exact_value() {
        let mdp = generate_random_mdp(8, 3, 2, 1.0, 3, 0.8).unwrap();
        let theta = crate::mdp::PolicyParams::new(Array2::from_shape_fn((3, 2), |(s, a)| {
            0.4 * s as f64 - 0.6 * a as f64
        }))
        .unwrap();
        let set = enumerate(&mdp, &theta).unwrap();
        let expected = expected_scalar(&set, |traj| {
            traj.steps
                .iter()
                .enumerate()
                .map(|(t, st)| mdp.discount.powi(t as i32) * st.reward)
                .sum()
        });
        let exact = exact_value(&mdp, &theta, None).unwrap();
        assert!((expected - exact).abs() <= 1e-12, "{expected} vs {exact}");
        let zero = expected_scalar(&set, |_| 0.0);
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn monte_carlo_frequencies_match_enumeration() {
        let mdp = generate_random_mdp(12, 2, 2, 1.0, 3, 0.9).unwrap();
        let theta = PolicyParams::zeros(2, 2);
        let set = enumerate(&mdp, &theta).unwrap();
        let n = 100_000usize;
        let trajs = sample_trajectories(&mdp, &theta, n, 5);
        // Count sampled (state, action) sequences against enumerated ones.
        let key = |t: &Trajectory| -> Vec<(usize, usize)> {
            t.steps.iter().map(|s| (s.state, s.action)).collect()
        };
        let mut counts = vec![0usize; set.len()];
        let keys: Vec<_> = set.trajectories.iter().map(key).collect();
        'outer: for t in &trajs {
            let k = key(t);
            for (i, ek) in keys.iter().enumerate() {
                if *ek == k {
                    counts[i] += 1;
                    continue 'outer;
                }
            }
            panic!("sampled trajectory not found in enumeration");
        }
        let tol = 4.0 / (n as f64).sqrt();
        for i in 0..set.len() {
            let freq = counts[i] as f64 / n as f64;
            assert!(
                (freq - set.probabilities[i]).abs() <= tol,
                "trajectory {i}: freq {freq} vs prob {}",
                set.probabilities[i]
            );
        }
    }
}
