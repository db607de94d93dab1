//! Joint rollouts, the replay buffer, and causal DiCE gradient estimation
//! for the two-agent game, in both on-policy and importance-weighted
//! off-policy forms.
//!
//! All estimates are computed in the "reward-at-t" arrangement
//!
//! ```text
//! grad_i      = sum_t w_t [ gamma^t r^i_t S^i_t - gamma^t Vhat_i(s^i_t) s^i_t ]
//! cross_i     = sum_t w_t [ gamma^t r^i_t S^1_t (S^2_t)^T
//!                           - gamma^t Vhat_i(s^i_t) (s^1_t (S^2_t)^T + S^1_{t-1} (s^2_t)^T) ]
//! ```
//!
//! with cumulative scores `S^j_t` under the *current* policies and the
//! cumulative joint importance ratio `w_t = prod_{u<=t} pi_1 pi_2 / mu_1 mu_2`
//! from the stored behavior log-probs. On freshly generated on-policy data
//! every per-step ratio is exactly 1.0, so the on-policy estimator is the
//! bitwise special case of the off-policy one. The baseline terms telescope
//! against the reward terms exactly as in the tabular Loaded-DiCE estimator,
//! keeping every output unbiased for any state-value baseline.

use std::collections::VecDeque;

use ndarray::{Array1, Array2};
use rand::Rng;

use metagrad_core::rng::rng_from_seed;

use crate::game::{next_state, partner_state, IpdGame, LolaError, Memory1Policy, N_POLICY_STATES};

/// One joint rollout; `states` holds agent-1's conditioning index per step,
/// `logp_*` the behavior log-probs of the executed actions.
#[derive(Debug, Clone, PartialEq)]
pub struct JointRollout {
    pub states: Vec<usize>,
    pub actions_1: Vec<u8>,
    pub actions_2: Vec<u8>,
    pub rewards_1: Vec<f64>,
    pub rewards_2: Vec<f64>,
    pub logp_1: Vec<f64>,
    pub logp_2: Vec<f64>,
}

impl JointRollout {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Undiscounted mean per-step rewards of both agents.
    pub fn mean_rewards(&self) -> (f64, f64) {
        let n = self.len() as f64;
        (
            self.rewards_1.iter().sum::<f64>() / n,
            self.rewards_2.iter().sum::<f64>() / n,
        )
    }
}

/// Samples `n` joint rollouts of length `game.rollout_length`;
/// deterministic given `seed`.
pub fn rollout(
    game: &IpdGame,
    p1: &Memory1Policy,
    p2: &Memory1Policy,
    n: usize,
    seed: u64,
) -> Vec<JointRollout> {
    assert!(n >= 1);
    let mut rng = rng_from_seed(seed);
    let horizon = game.rollout_length;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut r = JointRollout {
            states: Vec::with_capacity(horizon),
            actions_1: Vec::with_capacity(horizon),
            actions_2: Vec::with_capacity(horizon),
            rewards_1: Vec::with_capacity(horizon),
            rewards_2: Vec::with_capacity(horizon),
            logp_1: Vec::with_capacity(horizon),
            logp_2: Vec::with_capacity(horizon),
        };
        let mut state = 0usize;
        for _ in 0..horizon {
            let s2 = partner_state(state);
            let a1 = usize::from(rng.random::<f64>() < p1.cooperate_prob(state));
            let a2 = usize::from(rng.random::<f64>() < p2.cooperate_prob(s2));
            r.states.push(state);
            r.actions_1.push(a1 as u8);
            r.actions_2.push(a2 as u8);
            r.rewards_1.push(game.reward_1(a1, a2));
            r.rewards_2.push(game.reward_2(a1, a2));
            r.logp_1.push(p1.log_prob(state, a1));
            r.logp_2.push(p2.log_prob(s2, a2));
            state = next_state(a1, a2);
        }
        out.push(r);
    }
    out
}

/// FIFO replay buffer of joint rollouts.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<JointRollout>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, rollout: JointRollout) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(rollout);
    }

    pub fn extend(&mut self, rollouts: impl IntoIterator<Item = JointRollout>) {
        for r in rollouts {
            self.push(r);
        }
    }

    /// Uniform sample with replacement; deterministic given `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<JointRollout>, LolaError> {
        if self.entries.is_empty() {
            return Err(LolaError::EmptyBuffer);
        }
        let mut rng = rng_from_seed(seed);
        Ok((0..n)
            .map(|_| self.entries[rng.random_range(0..self.entries.len())].clone())
            .collect())
    }
}

/// Per-agent state-value baselines over the 5 conditioning states.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTables {
    pub agent_1: Array1<f64>,
    pub agent_2: Array1<f64>,
}

impl ValueTables {
    pub fn zeros() -> Self {
        Self {
            agent_1: Array1::zeros(N_POLICY_STATES),
            agent_2: Array1::zeros(N_POLICY_STATES),
        }
    }

    /// TD-style regression of each table toward the empirical discounted
    /// returns-to-go (relative scale) of the batch.
    pub fn update(&mut self, batch: &[JointRollout], gamma: f64, lr: f64) {
        let n = N_POLICY_STATES;
        let mut sum = vec![[0.0f64; 2]; n];
        let mut count = vec![[0.0f64; 2]; n];
        for r in batch {
            let h = r.len();
            let mut g1 = 0.0;
            let mut g2 = 0.0;
            let mut targets = vec![(0.0, 0.0); h];
            for t in (0..h).rev() {
                g1 = r.rewards_1[t] + gamma * g1;
                g2 = r.rewards_2[t] + gamma * g2;
                targets[t] = (g1, g2);
            }
            for t in 0..h {
                let s1 = r.states[t];
                let s2 = partner_state(s1);
                sum[s1][0] += targets[t].0;
                count[s1][0] += 1.0;
                sum[s2][1] += targets[t].1;
                count[s2][1] += 1.0;
            }
        }
        for s in 0..n {
            if count[s][0] > 0.0 {
                self.agent_1[s] += lr * (sum[s][0] / count[s][0] - self.agent_1[s]);
            }
            if count[s][1] > 0.0 {
                self.agent_2[s] += lr * (sum[s][1] / count[s][1] - self.agent_2[s]);
            }
        }
    }
}

/// Batch-averaged DiCE estimates. `grad[i][j]` is the gradient of agent
/// (i+1)'s objective with respect to agent (j+1)'s logits; `cross_i` is the
/// mixed second derivative of agent i's objective with rows over agent-1
/// logits and columns over agent-2 logits. All on the discounted-sum scale.
#[derive(Debug, Clone)]
pub struct DiceGrads {
    pub grad: [[Array1<f64>; 2]; 2],
    pub cross_1: Array2<f64>,
    pub cross_2: Array2<f64>,
}

/// On-policy causal DiCE estimates with per-state value baselines. The
/// per-step ratios are computed against the stored behavior log-probs, so
/// calling this on data generated by `(p1, p2)` uses unit ratios.
pub fn dice_grads(
    batch: &[JointRollout],
    p1: &Memory1Policy,
    p2: &Memory1Policy,
    values: &ValueTables,
    gamma: f64,
) -> Result<DiceGrads, LolaError> {
    dice_grads_clipped(batch, p1, p2, values, gamma, None)
}

/// [`dice_grads`] with optional control of the off-policyness level: each
/// per-step joint ratio is clamped into [1/clip, clip]. Unit ratios are
/// unaffected, so on-policy estimates are identical for any clip.
pub fn dice_grads_clipped(
    batch: &[JointRollout],
    p1: &Memory1Policy,
    p2: &Memory1Policy,
    values: &ValueTables,
    gamma: f64,
    ratio_clip: Option<f64>,
) -> Result<DiceGrads, LolaError> {
    if batch.is_empty() {
        return Err(LolaError::EmptyBatch);
    }
    let n = N_POLICY_STATES;
    let mut grad = [
        [Array1::<f64>::zeros(n), Array1::<f64>::zeros(n)],
        [Array1::<f64>::zeros(n), Array1::<f64>::zeros(n)],
    ];
    let mut cross_1 = Array2::<f64>::zeros((n, n));
    let mut cross_2 = Array2::<f64>::zeros((n, n));
    let mut s1_cum = Array1::<f64>::zeros(n);
    let mut s2_cum = Array1::<f64>::zeros(n);

    for r in batch {
        s1_cum.fill(0.0);
        s2_cum.fill(0.0);
        let mut w = 1.0f64;
        let mut disc = 1.0f64;
        for t in 0..r.len() {
            let st1 = r.states[t];
            let st2 = partner_state(st1);
            let a1 = r.actions_1[t] as usize;
            let a2 = r.actions_2[t] as usize;
            let ratio = ((p1.log_prob(st1, a1) - r.logp_1[t])
                + (p2.log_prob(st2, a2) - r.logp_2[t]))
                .exp();
            w *= ratio;
            let sc1 = p1.score(st1, a1);
            let sc2 = p2.score(st2, a2);
            let mut prev_s1 = [0.0f64; N_POLICY_STATES];
            for u in 0..n {
                prev_s1[u] = s1_cum[u];
            }
            s1_cum[st1] += sc1;
            s2_cum[st2] += sc2;

            let r1 = r.rewards_1[t];
            let r2 = r.rewards_2[t];
            let b1 = values.agent_1[st1];
            let b2 = values.agent_2[st2];
            let wd = w * disc;

            // First-order terms for each (objective, parameter) pair.
            grad[0][0].scaled_add(wd * r1, &s1_cum);
            grad[0][0][st1] -= wd * b1 * sc1;
            grad[0][1].scaled_add(wd * r1, &s2_cum);
            grad[0][1][st2] -= wd * b1 * sc2;
            grad[1][0].scaled_add(wd * r2, &s1_cum);
            grad[1][0][st1] -= wd * b2 * sc1;
            grad[1][1].scaled_add(wd * r2, &s2_cum);
            grad[1][1][st2] -= wd * b2 * sc2;

            // Cross terms: reward part S1 S2^T, telescoped baseline part
            // s1_t S2_t^T + S1_{t-1} s2_t^T.
            for u in 0..n {
                let s1u = s1_cum[u];
                if s1u != 0.0 {
                    for v in 0..n {
                        let prod = s1u * s2_cum[v];
                        if prod != 0.0 {
                            cross_1[[u, v]] += wd * r1 * prod;
                            cross_2[[u, v]] += wd * r2 * prod;
                        }
                    }
                }
            }
            for v in 0..n {
                let s2v = s2_cum[v];
                if s2v != 0.0 {
                    let val = sc1 * s2v;
                    cross_1[[st1, v]] -= wd * b1 * val;
                    cross_2[[st1, v]] -= wd * b2 * val;
                }
            }
            for u in 0..n {
                let p = prev_s1[u];
                if p != 0.0 {
                    let val = p * sc2;
                    cross_1[[u, st2]] -= wd * b1 * val;
                    cross_2[[u, st2]] -= wd * b2 * val;
                }
            }
            disc *= gamma;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for row in grad.iter_mut() {
        for g in row.iter_mut() {
            g.mapv_inplace(|x| x * inv);
        }
    }
    cross_1.mapv_inplace(|x| x * inv);
    cross_2.mapv_inplace(|x| x * inv);
    Ok(DiceGrads {
        grad,
        cross_1,
        cross_2,
    })
}

/// Importance-weighted DiCE over buffer data: identical computation to
/// [`dice_grads`], with the cumulative joint ratios doing the off-policy
/// correction. On on-policy data the two reproduce each other bitwise.
pub fn off_policy_dice_grads(
    buffer_sample: &[JointRollout],
    p1: &Memory1Policy,
    p2: &Memory1Policy,
    values: &ValueTables,
    gamma: f64,
) -> Result<DiceGrads, LolaError> {
    dice_grads(buffer_sample, p1, p2, values, gamma)
}
