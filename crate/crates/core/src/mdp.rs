//! Tabular MDPs with softmax policies: random generation, trajectory
//! sampling, and exact value / gradient / Hessian / reward-Jacobian
//! computation by dynamic programming.
//!
//! Conventions used throughout the crate:
//!
//! * Policy parameters are an `[n_states x n_actions]` matrix of logits;
//!   the flat parameter index of `(s, a)` is `s * n_actions + a` and the
//!   flat dimension is `d = n_states * n_actions`.
//! * Returns use absolute discounting from the trajectory start,
//!   `R(tau) = sum_t gamma^t r_t` over a fixed horizon.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_from_seed;

const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("dimension must be positive: {0}")]
    InvalidDimension(&'static str),
    #[error("discount must lie strictly in (0,1), got {0}")]
    InvalidDiscount(f64),
    #[error("Dirichlet density must be positive and finite, got {0}")]
    InvalidDensity(f64),
    #[error("noise coefficient must be non-negative, got {0}")]
    NegativeNoise(f64),
    #[error("{0} row {1} is not a probability vector")]
    NotStochastic(&'static str, usize),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("serialization: {0}")]
    Serde(String),
}

/// A finite-horizon tabular MDP.
///
/// `transition[[s, a, s2]]` is the probability of moving to `s2` after
/// taking action `a` in state `s`; every `(s, a)` row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Array3<f64>,
    pub reward: Array2<f64>,
    pub discount: f64,
    pub horizon: usize,
    pub initial_dist: Array1<f64>,
}

impl TabularMdp {
    pub fn new(
        transition: Array3<f64>,
        reward: Array2<f64>,
        discount: f64,
        horizon: usize,
        initial_dist: Array1<f64>,
    ) -> Result<Self, MdpError> {
        let (n_states, n_actions, n_next) = transition.dim();
        if n_states == 0 {
            return Err(MdpError::InvalidDimension("n_states"));
        }
        if n_actions == 0 {
            return Err(MdpError::InvalidDimension("n_actions"));
        }
        if horizon == 0 {
            return Err(MdpError::InvalidDimension("horizon"));
        }
        if n_next != n_states {
            return Err(MdpError::ShapeMismatch {
                expected: format!("[{n_states}, {n_actions}, {n_states}]"),
                got: format!("[{n_states}, {n_actions}, {n_next}]"),
            });
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(MdpError::InvalidDiscount(discount));
        }
        if reward.dim() != (n_states, n_actions) {
            return Err(MdpError::ShapeMismatch {
                expected: format!("[{n_states}, {n_actions}]"),
                got: format!("{:?}", reward.dim()),
            });
        }
        if initial_dist.len() != n_states {
            return Err(MdpError::ShapeMismatch {
                expected: format!("[{n_states}]"),
                got: format!("[{}]", initial_dist.len()),
            });
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(MdpError::NonFinite("reward"));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = transition.slice(ndarray::s![s, a, ..]);
                check_prob_row(row.iter().copied(), "transition", s)?;
            }
        }
        check_prob_row(initial_dist.iter().copied(), "initial_dist", 0)?;
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            discount,
            horizon,
            initial_dist,
        })
    }

    /// Flat parameter dimension of a policy for this MDP.
    pub fn param_dim(&self) -> usize {
        self.n_states * self.n_actions
    }

    fn check_override(&self, reward_override: Option<&Array2<f64>>) -> Result<(), MdpError> {
        if let Some(r) = reward_override {
            if r.dim() != (self.n_states, self.n_actions) {
                return Err(MdpError::ShapeMismatch {
                    expected: format!("[{}, {}]", self.n_states, self.n_actions),
                    got: format!("{:?}", r.dim()),
                });
            }
        }
        Ok(())
    }

    /// Serializes to a flat JSON document (dims, discount, horizon and
    /// row-major tensors) for reproducibility across runs.
    pub fn to_json(&self) -> String {
        let file = MdpFile {
            n_states: self.n_states,
            n_actions: self.n_actions,
            discount: self.discount,
            horizon: self.horizon,
            transition: self.transition.iter().copied().collect(),
            reward: self.reward.iter().copied().collect(),
            initial_dist: self.initial_dist.to_vec(),
        };
        serde_json::to_string(&file).expect("MDP serialization cannot fail")
    }

    /// Parses [`TabularMdp::to_json`] output, re-validating all invariants.
    pub fn from_json(text: &str) -> Result<Self, MdpError> {
        let file: MdpFile = serde_json::from_str(text).map_err(|e| MdpError::Serde(e.to_string()))?;
        let transition =
            Array3::from_shape_vec((file.n_states, file.n_actions, file.n_states), file.transition)
                .map_err(|e| MdpError::Serde(e.to_string()))?;
        let reward = Array2::from_shape_vec((file.n_states, file.n_actions), file.reward)
            .map_err(|e| MdpError::Serde(e.to_string()))?;
        TabularMdp::new(
            transition,
            reward,
            file.discount,
            file.horizon,
            Array1::from_vec(file.initial_dist),
        )
    }
}

#[derive(Serialize, Deserialize)]
struct MdpFile {
    n_states: usize,
    n_actions: usize,
    discount: f64,
    horizon: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
}

fn check_prob_row(
    row: impl Iterator<Item = f64>,
    what: &'static str,
    idx: usize,
) -> Result<(), MdpError> {
    let mut sum = 0.0;
    for p in row {
        if !p.is_finite() || p < 0.0 {
            return Err(MdpError::NotStochastic(what, idx));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(MdpError::NotStochastic(what, idx));
    }
    Ok(())
}

/// Softmax policy logits, `[n_states x n_actions]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub theta: Array2<f64>,
}

impl PolicyParams {
    pub fn new(theta: Array2<f64>) -> Result<Self, MdpError> {
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(MdpError::NonFinite("theta"));
        }
        Ok(Self { theta })
    }

    /// The uniform policy (all-zero logits).
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            theta: Array2::zeros((n_states, n_actions)),
        }
    }

    pub fn n_states(&self) -> usize {
        self.theta.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.theta.ncols()
    }

    /// Flat parameter dimension `d = n_states * n_actions`.
    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Returns `theta + scale * v` with `v` in flat (row-major) layout.
    pub fn add_flat(&self, v: &Array1<f64>, scale: f64) -> PolicyParams {
        assert_eq!(v.len(), self.dim(), "flat update has wrong dimension");
        let mut theta = self.theta.clone();
        for (i, x) in theta.iter_mut().enumerate() {
            *x += scale * v[i];
        }
        PolicyParams { theta }
    }

    pub fn flat(&self) -> Array1<f64> {
        Array1::from_iter(self.theta.iter().copied())
    }
}

/// One `(state, action, reward)` step of a sampled trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// A fixed-horizon trajectory. `log_probs`, when present, caches the
/// per-step action log-probabilities under the behavior policy that
/// generated the trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub log_probs: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

/// Draws a random MDP: transition rows from a symmetric Dirichlet with
/// concentration `density`, rewards i.i.d. uniform on [0,1], uniform
/// initial distribution. Fully deterministic given `seed`.
pub fn generate_random_mdp(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    density: f64,
    horizon: usize,
    discount: f64,
) -> Result<TabularMdp, MdpError> {
    if n_states == 0 {
        return Err(MdpError::InvalidDimension("n_states"));
    }
    if n_actions == 0 {
        return Err(MdpError::InvalidDimension("n_actions"));
    }
    if horizon == 0 {
        return Err(MdpError::InvalidDimension("horizon"));
    }
    if !(density > 0.0) || !density.is_finite() {
        return Err(MdpError::InvalidDensity(density));
    }
    if !(discount > 0.0 && discount < 1.0) {
        return Err(MdpError::InvalidDiscount(discount));
    }
    let mut rng = rng_from_seed(seed);
    let mut transition = Array3::zeros((n_states, n_actions, n_states));
    let mut row = vec![0.0; n_states];
    for s in 0..n_states {
        for a in 0..n_actions {
            sample_dirichlet_row(&mut rng, density, &mut row);
            for (s2, p) in row.iter().enumerate() {
                transition[[s, a, s2]] = *p;
            }
        }
    }
    let reward = Array2::from_shape_fn((n_states, n_actions), |_| rng.random::<f64>());
    let initial_dist = Array1::from_elem(n_states, 1.0 / n_states as f64);
    TabularMdp::new(transition, reward, discount, horizon, initial_dist)
}

/// Symmetric Dirichlet(alpha) sample computed in log space.
///
/// Uses the boost representation Gamma(a) = Gamma(a+1) * U^(1/a), so the
/// normalization stays well defined even for tiny concentrations where
/// direct Gamma samples underflow to zero.
fn sample_dirichlet_row(rng: &mut impl Rng, alpha: f64, out: &mut [f64]) {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("valid Gamma shape");
    let mut max = f64::NEG_INFINITY;
    for slot in out.iter_mut() {
        let g: f64 = gamma.sample(rng);
        let mut u: f64 = rng.random();
        while u == 0.0 {
            u = rng.random();
        }
        let log_g = g.ln() + u.ln() / alpha;
        *slot = log_g;
        if log_g > max {
            max = log_g;
        }
    }
    let mut sum = 0.0;
    for slot in out.iter_mut() {
        *slot = (*slot - max).exp();
        sum += *slot;
    }
    for slot in out.iter_mut() {
        *slot /= sum;
    }
}

/// Row-stochastic action probabilities of the softmax policy
/// (max-subtraction for numerical stability).
pub fn policy_probs(theta: &PolicyParams) -> Array2<f64> {
    let (s_n, a_n) = theta.theta.dim();
    let mut probs = Array2::zeros((s_n, a_n));
    for s in 0..s_n {
        let row = theta.theta.row(s);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for a in 0..a_n {
            let e = (row[a] - max).exp();
            probs[[s, a]] = e;
            sum += e;
        }
        for a in 0..a_n {
            probs[[s, a]] /= sum;
        }
    }
    probs
}

/// Samples `n` i.i.d. trajectories of length `horizon` under the softmax
/// policy, filling the behavior log-prob cache. Deterministic given `seed`.
pub fn sample_trajectories(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    n: usize,
    seed: u64,
) -> Vec<Trajectory> {
    assert!(n >= 1, "need at least one trajectory");
    let probs = policy_probs(theta);
    let mut rng = rng_from_seed(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut steps = Vec::with_capacity(mdp.horizon);
        let mut log_probs = Vec::with_capacity(mdp.horizon);
        let mut state = sample_index(&mut rng, mdp.initial_dist.iter().copied());
        for _ in 0..mdp.horizon {
            let action = sample_index(&mut rng, probs.row(state).iter().copied());
            let reward = mdp.reward[[state, action]];
            steps.push(Step {
                state,
                action,
                reward,
            });
            log_probs.push(probs[[state, action]].ln());
            state = sample_index(
                &mut rng,
                mdp.transition.slice(ndarray::s![state, action, ..]).iter().copied(),
            );
        }
        out.push(Trajectory {
            steps,
            log_probs: Some(log_probs),
        });
    }
    out
}

fn sample_index(rng: &mut impl Rng, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        cum += p;
        last = i;
        if u < cum {
            return i;
        }
    }
    // Rounding can leave cum fractionally below 1; fall back to the last bin.
    last
}

/// Forward/backward dynamic-programming tables for one (mdp, theta, reward)
/// triple. `d[t]` is the state distribution at time t, `q[t]`/`v[t]` use the
/// relative-discount convention so V = sum_s rho(s) v[0](s).
struct DpTables {
    probs: Array2<f64>,
    d: Vec<Array1<f64>>,
    q: Vec<Array2<f64>>,
    v: Vec<Array1<f64>>,
}

fn dp_tables(mdp: &TabularMdp, theta: &PolicyParams, reward: &Array2<f64>) -> DpTables {
    let (s_n, a_n) = (mdp.n_states, mdp.n_actions);
    let h = mdp.horizon;
    let gamma = mdp.discount;
    let probs = policy_probs(theta);

    let mut d = Vec::with_capacity(h);
    d.push(mdp.initial_dist.clone());
    for t in 1..h {
        let prev = &d[t - 1];
        let mut next = Array1::zeros(s_n);
        for s in 0..s_n {
            if prev[s] == 0.0 {
                continue;
            }
            for a in 0..a_n {
                let w = prev[s] * probs[[s, a]];
                if w == 0.0 {
                    continue;
                }
                for s2 in 0..s_n {
                    next[s2] += w * mdp.transition[[s, a, s2]];
                }
            }
        }
        d.push(next);
    }

    let mut q = vec![Array2::zeros((s_n, a_n)); h];
    let mut v = vec![Array1::zeros(s_n); h + 1];
    for t in (0..h).rev() {
        for s in 0..s_n {
            let mut vs = 0.0;
            for a in 0..a_n {
                let mut qa = reward[[s, a]];
                if t + 1 < h {
                    let mut cont = 0.0;
                    for s2 in 0..s_n {
                        cont += mdp.transition[[s, a, s2]] * v[t + 1][s2];
                    }
                    qa += gamma * cont;
                }
                q[t][[s, a]] = qa;
                vs += probs[[s, a]] * qa;
            }
            v[t][s] = vs;
        }
    }
    DpTables { probs, d, q, v }
}

/// Gradients of the forward state distributions, `grad_d[t]` of shape
/// `[n_states x d]`.
fn state_dist_gradients(mdp: &TabularMdp, dp: &DpTables) -> Vec<Array2<f64>> {
    let (s_n, a_n) = (mdp.n_states, mdp.n_actions);
    let d_dim = s_n * a_n;
    let h = mdp.horizon;
    let mut grad_d = Vec::with_capacity(h);
    grad_d.push(Array2::zeros((s_n, d_dim)));
    for t in 1..h {
        let prev = &dp.d[t - 1];
        let prev_grad = &grad_d[t - 1];
        let mut next = Array2::zeros((s_n, d_dim));
        for s in 0..s_n {
            for a in 0..a_n {
                let pi = dp.probs[[s, a]];
                for s2 in 0..s_n {
                    let p = mdp.transition[[s, a, s2]];
                    if p == 0.0 {
                        continue;
                    }
                    // pi(a|s) * grad d_t(s): dense in the parameter index.
                    if pi != 0.0 {
                        let w = p * pi;
                        let src = prev_grad.row(s);
                        let mut dst = next.row_mut(s2);
                        for k in 0..d_dim {
                            dst[k] += w * src[k];
                        }
                    }
                    // d_t(s) * grad pi(a|s): supported on the row-s block.
                    let ds = prev[s];
                    if ds != 0.0 {
                        for b in 0..a_n {
                            let dpi = pi * (if a == b { 1.0 } else { 0.0 } - dp.probs[[s, b]]);
                            next[[s2, s * a_n + b]] += p * ds * dpi;
                        }
                    }
                }
            }
        }
        grad_d.push(next);
    }
    grad_d
}

/// Gradients of Q_t and V_t with respect to the flat policy parameters.
/// Returned as (grad_q, grad_v) with shapes `[h][(s,a) x d]` and `[h][s x d]`.
fn action_value_gradients(
    mdp: &TabularMdp,
    dp: &DpTables,
) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let (s_n, a_n) = (mdp.n_states, mdp.n_actions);
    let d_dim = s_n * a_n;
    let h = mdp.horizon;
    let gamma = mdp.discount;
    let mut grad_q = vec![Array2::zeros((s_n * a_n, d_dim)); h];
    let mut grad_v = vec![Array2::zeros((s_n, d_dim)); h + 1];
    for t in (0..h).rev() {
        for s in 0..s_n {
            for a in 0..a_n {
                if t + 1 < h {
                    let mut row = grad_q[t].row_mut(s * a_n + a);
                    for s2 in 0..s_n {
                        let p = mdp.transition[[s, a, s2]];
                        if p == 0.0 {
                            continue;
                        }
                        let src = grad_v[t + 1].row(s2);
                        let w = gamma * p;
                        for k in 0..d_dim {
                            row[k] += w * src[k];
                        }
                    }
                }
            }
            // grad V_t(s) = sum_a [grad pi(a|s) Q + pi grad Q]
            for a in 0..a_n {
                let pi = dp.probs[[s, a]];
                let qa = dp.q[t][[s, a]];
                let src = grad_q[t].row(s * a_n + a);
                let mut dst = grad_v[t].row_mut(s);
                if pi != 0.0 {
                    for k in 0..d_dim {
                        dst[k] += pi * src[k];
                    }
                }
                for b in 0..a_n {
                    let dpi = pi * (if a == b { 1.0 } else { 0.0 } - dp.probs[[s, b]]);
                    grad_v[t][[s, s * a_n + b]] += dpi * qa;
                }
            }
        }
    }
    (grad_q, grad_v)
}

/// Exact expected discounted return under the softmax policy, computed by
/// forward DP of the state distribution. `reward_override` replaces the
/// MDP's reward matrix (it serves intrinsic-reward setups where the inner
/// objective uses R + phi).
pub fn exact_value(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    reward_override: Option<&Array2<f64>>,
) -> Result<f64, MdpError> {
    mdp.check_override(reward_override)?;
    let reward = reward_override.unwrap_or(&mdp.reward);
    let dp = dp_tables(mdp, theta, reward);
    let mut value = 0.0;
    let mut disc = 1.0;
    for t in 0..mdp.horizon {
        let mut step = 0.0;
        for s in 0..mdp.n_states {
            let ds = dp.d[t][s];
            if ds == 0.0 {
                continue;
            }
            let mut mean_r = 0.0;
            for a in 0..mdp.n_actions {
                mean_r += dp.probs[[s, a]] * reward[[s, a]];
            }
            step += ds * mean_r;
        }
        value += disc * step;
        disc *= mdp.discount;
    }
    Ok(value)
}

/// Analytic gradient of [`exact_value`] with respect to the flat policy
/// parameters: grad[(s,b)] = sum_t gamma^t d_t(s) pi(b|s) (Q_t(s,b) - V_t(s)).
pub fn exact_policy_gradient(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    reward_override: Option<&Array2<f64>>,
) -> Result<Array1<f64>, MdpError> {
    mdp.check_override(reward_override)?;
    let reward = reward_override.unwrap_or(&mdp.reward);
    let dp = dp_tables(mdp, theta, reward);
    let (s_n, a_n) = (mdp.n_states, mdp.n_actions);
    let mut grad = Array1::zeros(s_n * a_n);
    let mut disc = 1.0;
    for t in 0..mdp.horizon {
        for s in 0..s_n {
            let ds = dp.d[t][s];
            if ds == 0.0 {
                continue;
            }
            for b in 0..a_n {
                grad[s * a_n + b] +=
                    disc * ds * dp.probs[[s, b]] * (dp.q[t][[s, b]] - dp.v[t][s]);
            }
        }
        disc *= mdp.discount;
    }
    Ok(grad)
}

/// Analytic Hessian of [`exact_value`]. Assembled from the three exact
/// terms of d^2 V: distribution gradients x policy gradients, second
/// derivatives of the softmax, and policy gradients x Q-value gradients.
pub fn exact_policy_hessian(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    reward_override: Option<&Array2<f64>>,
) -> Result<Array2<f64>, MdpError> {
    mdp.check_override(reward_override)?;
    let reward = reward_override.unwrap_or(&mdp.reward);
    let dp = dp_tables(mdp, theta, reward);
    let grad_d = state_dist_gradients(mdp, &dp);
    let (grad_q, _grad_v) = action_value_gradients(mdp, &dp);
    let (s_n, a_n) = (mdp.n_states, mdp.n_actions);
    let d_dim = s_n * a_n;
    let mut hess = Array2::zeros((d_dim, d_dim));
    let mut disc = 1.0;
    for t in 0..mdp.horizon {
        for s in 0..s_n {
            let ds = dp.d[t][s];
            let vs = dp.v[t][s];
            // w_s[b] = sum_a dpi(a|s)/dtheta_(s,b) Q = pi_b (Q_b - V):
            // the gradient of the local expected Q in the row-s block.
            // Term 1: grad d_t(s) (x) w_s, columns restricted to row s.
            for b in 0..a_n {
                let w = disc * dp.probs[[s, b]] * (dp.q[t][[s, b]] - vs);
                if w == 0.0 {
                    continue;
                }
                let col = s * a_n + b;
                let src = grad_d[t].row(s);
                for p in 0..d_dim {
                    hess[[p, col]] += src[p] * w;
                }
            }
            if ds == 0.0 {
                continue;
            }
            // Term 2: d_t(s) sum_a Q grad^2 pi(a|s), the symmetric
            // [a_n x a_n] block at (s, s). With adv_b = Q(s,b) - V(s):
            // block[b][c] = delta_bc pi_b adv_b - pi_b pi_c (adv_b + adv_c).
            for b in 0..a_n {
                let pb = dp.probs[[s, b]];
                let adv_b = dp.q[t][[s, b]] - vs;
                for c in 0..a_n {
                    let pc = dp.probs[[s, c]];
                    let adv_c = dp.q[t][[s, c]] - vs;
                    let mut val = -pb * pc * (adv_b + adv_c);
                    if b == c {
                        val += pb * adv_b;
                    }
                    hess[[s * a_n + b, s * a_n + c]] += disc * ds * val;
                }
            }
            // Term 3: grad Q_t(s,a) (x) d_t(s) grad pi(a|s).
            for a in 0..a_n {
                let pa = dp.probs[[s, a]];
                if pa == 0.0 {
                    continue;
                }
                let src = grad_q[t].row(s * a_n + a);
                for b in 0..a_n {
                    let w = disc * ds * pa * (if a == b { 1.0 } else { 0.0 } - dp.probs[[s, b]]);
                    if w == 0.0 {
                        continue;
                    }
                    let col = s * a_n + b;
                    for p in 0..d_dim {
                        hess[[p, col]] += src[p] * w;
                    }
                }
            }
        }
        disc *= mdp.discount;
    }
    Ok(hess)
}

/// Mixed derivative of the value under reward `R + phi` with respect to the
/// reward entries (rows) and the policy parameters (columns):
/// `J[(s,a)][q] = d^2 V / d phi_(s,a) d theta_q`. The value is linear in the
/// reward, so the result does not depend on the override actually supplied.
pub fn exact_reward_jacobian(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    reward_override: Option<&Array2<f64>>,
) -> Result<Array2<f64>, MdpError> {
    mdp.check_override(reward_override)?;
    let reward = reward_override.unwrap_or(&mdp.reward);
    let dp = dp_tables(mdp, theta, reward);
    let grad_d = state_dist_gradients(mdp, &dp);
    let (s_n, a_n) = (mdp.n_states, mdp.n_actions);
    let d_dim = s_n * a_n;
    let mut jac = Array2::zeros((d_dim, d_dim));
    let mut disc = 1.0;
    for t in 0..mdp.horizon {
        for s in 0..s_n {
            let ds = dp.d[t][s];
            for a in 0..a_n {
                let pa = dp.probs[[s, a]];
                let row = s * a_n + a;
                // d/dtheta of [d_t(s) pi(a|s)]:
                // grad d_t(s) * pi(a|s), dense over columns.
                if pa != 0.0 {
                    let src = grad_d[t].row(s);
                    let mut dst = jac.row_mut(row);
                    for q in 0..d_dim {
                        dst[q] += disc * pa * src[q];
                    }
                }
                // d_t(s) * grad pi(a|s), row-s block of columns.
                if ds != 0.0 {
                    for b in 0..a_n {
                        let dpi = pa * (if a == b { 1.0 } else { 0.0 } - dp.probs[[s, b]]);
                        jac[[row, s * a_n + b]] += disc * ds * dpi;
                    }
                }
            }
        }
        disc *= mdp.discount;
    }
    Ok(jac)
}

/// Per-state exact value-to-go of the full horizon started at each state
/// (V_0(s)), plus i.i.d. Gaussian noise scaled by `noise_coefficient`.
/// Simulates an estimated value function; noise is fresh per call and
/// deterministic given `seed`.
pub fn noisy_value_table(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    noise_coefficient: f64,
    seed: u64,
) -> Result<Array1<f64>, MdpError> {
    if noise_coefficient < 0.0 || !noise_coefficient.is_finite() {
        return Err(MdpError::NegativeNoise(noise_coefficient));
    }
    let dp = dp_tables(mdp, theta, &mdp.reward);
    let mut table = dp.v[0].clone();
    if noise_coefficient > 0.0 {
        let mut rng = rng_from_seed(seed);
        let normal = rand_distr::Normal::new(0.0, 1.0).expect("valid normal");
        for x in table.iter_mut() {
            *x += noise_coefficient * normal.sample(&mut rng);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn bandit(rewards: [f64; 2], horizon: usize, discount: f64) -> TabularMdp {
        let transition = Array3::from_shape_vec((1, 2, 1), vec![1.0, 1.0]).unwrap();
        let reward = arr2(&[[rewards[0], rewards[1]]]);
        TabularMdp::new(transition, reward, discount, horizon, Array1::from_vec(vec![1.0])).unwrap()
    }

    #[test]
    fn generate_rejects_bad_arguments() {
        assert!(generate_random_mdp(0, 0, 2, 1.0, 5, 0.9).is_err());
        assert!(generate_random_mdp(0, 2, 0, 1.0, 5, 0.9).is_err());
        assert!(generate_random_mdp(0, 2, 2, 0.0, 5, 0.9).is_err());
        assert!(generate_random_mdp(0, 2, 2, -1.0, 5, 0.9).is_err());
        assert!(generate_random_mdp(0, 2, 2, 1.0, 0, 0.9).is_err());
        assert!(generate_random_mdp(0, 2, 2, 1.0, 5, 1.0).is_err());
        assert!(generate_random_mdp(0, 2, 2, 1.0, 5, 0.0).is_err());
    }

    #[test]
    fn generate_is_deterministic_and_stochastic() {
        let a = generate_random_mdp(42, 20, 5, 0.001, 20, 0.8).unwrap();
        let b = generate_random_mdp(42, 20, 5, 0.001, 20, 0.8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.transition.dim(), (20, 5, 20));
        for s in 0..20 {
            for act in 0..5 {
                let sum: f64 = a.transition.slice(ndarray::s![s, act, ..]).sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
        let c = generate_random_mdp(43, 20, 5, 0.001, 20, 0.8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tiny_density_rows_are_near_point_mass() {
        let mdp = generate_random_mdp(7, 10, 3, 0.001, 5, 0.9).unwrap();
        let mut mean_max = 0.0;
        for s in 0..10 {
            for a in 0..3 {
                let row = mdp.transition.slice(ndarray::s![s, a, ..]);
                mean_max += row.iter().copied().fold(0.0, f64::max);
            }
        }
        mean_max /= 30.0;
        assert!(mean_max > 0.95, "mean max prob {mean_max}");
    }

    #[test]
    fn dirichlet_alpha_one_moments() {
        // Dirichlet(1) over K=4 components: mean 1/4, var 3/80.
        let mut rng = rng_from_seed(99);
        let mut row = [0.0; 4];
        let n = 20000;
        let (mut mean, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            sample_dirichlet_row(&mut rng, 1.0, &mut row);
            mean += row[0];
            m2 += row[0] * row[0];
        }
        mean /= n as f64;
        let var = m2 / n as f64 - mean * mean;
        assert!((mean - 0.25).abs() < 0.01, "mean {mean}");
        assert!((var - 0.0375).abs() < 0.005, "var {var}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let theta = PolicyParams::zeros(3, 4);
        let probs = policy_probs(&theta);
        for p in probs.iter() {
            assert!((p - 0.25).abs() <= 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance_and_closed_form() {
        let theta = PolicyParams::new(arr2(&[[7.5, 7.5, 7.5]])).unwrap();
        let probs = policy_probs(&theta);
        for p in probs.iter() {
            assert!((p - 1.0 / 3.0).abs() <= 1e-15);
        }
        let theta = PolicyParams::new(arr2(&[[10.0, 0.0]])).unwrap();
        let probs = policy_probs(&theta);
        let sigma = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((probs[[0, 0]] - sigma).abs() <= 1e-15);
        assert!((probs[[0, 1]] - (1.0 - sigma)).abs() <= 1e-15);
    }

    #[test]
    fn sampling_is_deterministic() {
        let mdp = generate_random_mdp(5, 4, 3, 1.0, 6, 0.9).unwrap();
        let theta = PolicyParams::zeros(4, 3);
        let a = sample_trajectories(&mdp, &theta, 10, 77);
        let b = sample_trajectories(&mdp, &theta, 10, 77);
        assert_eq!(a, b);
        let c = sample_trajectories(&mdp, &theta, 10, 78);
        assert_ne!(a, c);
    }

    #[test]
    fn deterministic_chain_yields_unique_trajectory() {
        // 2-state cycle, 1 action, point-mass transitions and initial state.
        let transition = Array3::from_shape_vec((2, 1, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let reward = arr2(&[[1.0], [0.5]]);
        let mdp = TabularMdp::new(
            transition,
            reward,
            0.9,
            4,
            Array1::from_vec(vec![1.0, 0.0]),
        )
        .unwrap();
        let theta = PolicyParams::zeros(2, 1);
        let trajs = sample_trajectories(&mdp, &theta, 5, 0);
        let states: Vec<usize> = trajs[0].steps.iter().map(|s| s.state).collect();
        assert_eq!(states, vec![0, 1, 0, 1]);
        for t in &trajs {
            assert_eq!(t.steps, trajs[0].steps);
            for step in &t.steps {
                assert_eq!(step.reward, mdp.reward[[step.state, step.action]]);
            }
        }
    }

    #[test]
    fn initial_state_frequencies_match_initial_dist() {
        let mdp = generate_random_mdp(11, 4, 2, 1.0, 3, 0.9).unwrap();
        let theta = PolicyParams::zeros(4, 2);
        let n = 1000;
        let trajs = sample_trajectories(&mdp, &theta, n, 3);
        let mut counts = vec![0usize; 4];
        for t in &trajs {
            counts[t.steps[0].state] += 1;
        }
        let tol = 3.0 / (n as f64).sqrt();
        for s in 0..4 {
            let freq = counts[s] as f64 / n as f64;
            assert!((freq - mdp.initial_dist[s]).abs() <= tol);
        }
    }

    #[test]
    fn one_state_value_is_geometric_series() {
        let mdp = bandit([2.0, 2.0], 7, 0.8);
        let theta = PolicyParams::zeros(1, 2);
        let v = exact_value(&mdp, &theta, None).unwrap();
        let expected = 2.0 * (1.0 - 0.8f64.powi(7)) / (1.0 - 0.8);
        assert!((v - expected).abs() <= 1e-12);
    }

    #[test]
    fn zero_reward_override_gives_zero_value() {
        let mdp = generate_random_mdp(3, 5, 3, 1.0, 8, 0.7).unwrap();
        let theta = PolicyParams::zeros(5, 3);
        let zeros = Array2::zeros((5, 3));
        assert_eq!(exact_value(&mdp, &theta, Some(&zeros)).unwrap(), 0.0);
    }

    #[test]
    fn override_shape_mismatch_is_rejected() {
        let mdp = generate_random_mdp(3, 5, 3, 1.0, 8, 0.7).unwrap();
        let theta = PolicyParams::zeros(5, 3);
        let bad = Array2::zeros((3, 5));
        assert!(exact_value(&mdp, &theta, Some(&bad)).is_err());
        assert!(exact_policy_gradient(&mdp, &theta, Some(&bad)).is_err());
        assert!(exact_policy_hessian(&mdp, &theta, Some(&bad)).is_err());
        assert!(exact_reward_jacobian(&mdp, &theta, Some(&bad)).is_err());
    }

    #[test]
    fn constant_reward_has_zero_gradient_and_hessian() {
        let mdp = generate_random_mdp(9, 4, 3, 1.0, 6, 0.9).unwrap();
        let theta = PolicyParams::new(Array2::from_shape_fn((4, 3), |(s, a)| {
            0.3 * s as f64 - 0.2 * a as f64
        }))
        .unwrap();
        let flat = Array2::from_elem((4, 3), 1.7);
        let g = exact_policy_gradient(&mdp, &theta, Some(&flat)).unwrap();
        assert!(g.iter().all(|x| x.abs() <= 1e-12), "gradient {g}");
        let h = exact_policy_hessian(&mdp, &theta, Some(&flat)).unwrap();
        assert!(h.iter().all(|x| x.abs() <= 1e-11), "hessian max {}",
            h.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    }

    #[test]
    fn bandit_gradient_closed_form() {
        let h = 6;
        let gamma = 0.9;
        let mdp = bandit([1.0, 0.0], h, gamma);
        let theta = PolicyParams::zeros(1, 2);
        let g = exact_policy_gradient(&mdp, &theta, None).unwrap();
        let c: f64 = (0..h).map(|t| gamma.powi(t as i32)).sum();
        assert!((g[0] - c * 0.25).abs() <= 1e-12);
        assert!((g[1] + c * 0.25).abs() <= 1e-12);
    }

    #[test]
    fn hessian_is_symmetric() {
        let mdp = generate_random_mdp(21, 5, 3, 1.0, 10, 0.8).unwrap();
        let theta = PolicyParams::new(Array2::from_shape_fn((5, 3), |(s, a)| {
            ((s * 3 + a) as f64 * 0.37).sin()
        }))
        .unwrap();
        let h = exact_policy_hessian(&mdp, &theta, None).unwrap();
        let mut asym = 0.0f64;
        for p in 0..h.nrows() {
            for q in 0..h.ncols() {
                asym = asym.max((h[[p, q]] - h[[q, p]]).abs());
            }
        }
        assert!(asym <= 1e-10, "asymmetry {asym}");
    }

    #[test]
    fn reward_jacobian_ignores_override_value() {
        let mdp = generate_random_mdp(13, 4, 2, 1.0, 5, 0.85).unwrap();
        let theta = PolicyParams::zeros(4, 2);
        let j0 = exact_reward_jacobian(&mdp, &theta, None).unwrap();
        let shifted = &mdp.reward + 0.5;
        let j1 = exact_reward_jacobian(&mdp, &theta, Some(&shifted)).unwrap();
        assert_eq!(j0, j1);
    }

    #[test]
    fn reward_jacobian_zero_rows_for_unreachable_pairs() {
        // State 1 unreachable: initial mass on state 0, self-loop transitions.
        let transition =
            Array3::from_shape_vec((2, 1, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let reward = arr2(&[[1.0], [1.0]]);
        let mdp = TabularMdp::new(transition, reward, 0.9, 4, Array1::from_vec(vec![1.0, 0.0]))
            .unwrap();
        let theta = PolicyParams::zeros(2, 1);
        let j = exact_reward_jacobian(&mdp, &theta, None).unwrap();
        for q in 0..2 {
            assert_eq!(j[[1, q]], 0.0, "unreachable (s=1,a=0) row must be zero");
        }
    }

    #[test]
    fn noisy_value_table_zero_noise_is_exact() {
        let mdp = bandit([2.0, 2.0], 5, 0.5);
        let theta = PolicyParams::zeros(1, 2);
        let table = noisy_value_table(&mdp, &theta, 0.0, 1).unwrap();
        let expected = 2.0 * (1.0 - 0.5f64.powi(5)) / 0.5;
        assert!((table[0] - expected).abs() <= 1e-12);
        assert!(noisy_value_table(&mdp, &theta, -0.5, 1).is_err());
    }

    #[test]
    fn noisy_value_table_noise_variance_matches_coefficient() {
        let mdp = generate_random_mdp(2, 3, 2, 1.0, 5, 0.9).unwrap();
        let theta = PolicyParams::zeros(3, 2);
        let exact = noisy_value_table(&mdp, &theta, 0.0, 0).unwrap();
        let coeff = 1.0;
        let n_seeds = 10_000;
        let (mut sum, mut sum2, mut count) = (0.0, 0.0, 0);
        for seed in 0..n_seeds {
            let noisy = noisy_value_table(&mdp, &theta, coeff, seed).unwrap();
            for s in 0..3 {
                let e = noisy[s] - exact[s];
                sum += e;
                sum2 += e * e;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = sum2 / count as f64 - mean * mean;
        assert!((var - coeff * coeff).abs() < 0.05 * coeff * coeff, "var {var}");
    }

    #[test]
    fn value_linear_in_reward() {
        let mdp = generate_random_mdp(31, 4, 3, 1.0, 7, 0.9).unwrap();
        let theta = PolicyParams::new(Array2::from_shape_fn((4, 3), |(s, a)| {
            0.1 * (s as f64 - a as f64)
        }))
        .unwrap();
        let phi = Array2::from_shape_fn((4, 3), |(s, a)| ((s + 2 * a) as f64 * 0.11).cos());
        let total = &mdp.reward + &phi;
        let v_sum = exact_value(&mdp, &theta, Some(&total)).unwrap();
        let v_r = exact_value(&mdp, &theta, None).unwrap();
        let v_phi = exact_value(&mdp, &theta, Some(&phi)).unwrap();
        assert!((v_sum - (v_r + v_phi)).abs() <= 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let mdp = generate_random_mdp(17, 4, 2, 0.5, 6, 0.9).unwrap();
        let text = mdp.to_json();
        let back = TabularMdp::from_json(&text).unwrap();
        assert_eq!(mdp, back);
        assert_eq!(text, back.to_json());
        assert!(TabularMdp::from_json("{\"n_states\": 1}").is_err());
    }
}
