//! Stochastic first-order, Hessian, and reward-Jacobian estimators from
//! trajectory batches.
//!
//! Shared per-trajectory notation (all analytic for softmax tabular
//! policies): score `s_t = grad log pi(a_t|s_t)`; cumulative score
//! `S_t = sum_{u<=t} s_u`; per-step log-prob Hessian
//! `L_t = grad^2 log pi(a_t|s_t) = -(diag(pi) - pi pi^T)` on the row-`s_t`
//! block (action independent); return-to-go `G_t = sum_{u>=t} gamma^u r_u`
//! (absolute discounting); advantage `A_t = G_t - gamma^t * Vhat(s_t)`.
//!
//! Hessian estimators per trajectory:
//!
//! * `DiCE`        sum_t gamma^t r_t (Lbar_t + S_t S_t^T) — unbiased, high
//!   variance. Equivalently: pair weights G_max(t1,t2) on score outer
//!   products plus G_t on each L_t.
//! * `LoadedDiCE`  sum_t A_t (L_t + s_t s_t^T + s_t S_{t-1}^T + S_{t-1} s_t^T)
//!   — the telescoped per-step form whose cumulative sum reproduces the DiCE
//!   weights, so any state baseline cancels in expectation. Pair weights
//!   A_max(t1,t2), per-step A_t on L_t.
//! * `LVC`         sum_t A_t (L_t + s_t s_t^T) — per-step curvature only;
//!   low variance, biased for multi-step problems.
//! * `AD`          sum_t A_t L_t — drops all score outer products, the
//!   classical biased autodiff Hessian.
//!
//! All estimators are pure functions of (batch, theta, baseline); batches
//! are reduced in their given order.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::mdp::{policy_probs, PolicyParams, Trajectory};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("trajectory {0} has horizon {1}, expected {2}")]
    HorizonMismatch(usize, usize, usize),
    #[error("the Exact kind has no sampled form; use the mdp module")]
    ExactKindNotStochastic,
    #[error("behavior log-probs missing from trajectory {0}")]
    MissingLogProbs(usize),
    #[error("baseline has length {0}, expected {1}")]
    BaselineShape(usize, usize),
    #[error("reward override has shape {0:?}, expected {1:?}")]
    OverrideShape((usize, usize), (usize, usize)),
}

/// Estimator family selector. Stochastic batch sizes are carried separately
/// (see `meta::PathEstimator`); these are the per-trajectory forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Exact,
    Dice,
    LoadedDice,
    Lvc,
    Ad,
}

impl EstimatorKind {
    pub fn is_stochastic(self) -> bool {
        self != EstimatorKind::Exact
    }

    /// True for the actor-critic family whose first-order form uses
    /// per-step advantages with a value baseline.
    pub fn uses_baseline(self) -> bool {
        matches!(
            self,
            EstimatorKind::LoadedDice | EstimatorKind::Lvc | EstimatorKind::Ad
        )
    }
}

#[derive(Debug, Clone)]
pub struct GradEstimate {
    pub value: Array1<f64>,
    pub kind: EstimatorKind,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct HessianEstimate {
    pub value: Array2<f64>,
    pub kind: EstimatorKind,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct JacobianEstimate {
    pub value: Array2<f64>,
    pub kind: EstimatorKind,
    pub batch_size: usize,
}

/// Validated inputs shared by all batch estimators.
struct BatchContext<'a> {
    batch: &'a [Trajectory],
    probs: Array2<f64>,
    n_states: usize,
    n_actions: usize,
    horizon: usize,
    gamma: f64,
    baseline: Option<&'a Array1<f64>>,
    reward_override: Option<&'a Array2<f64>>,
}

impl<'a> BatchContext<'a> {
    fn new(
        batch: &'a [Trajectory],
        theta: &PolicyParams,
        gamma: f64,
        baseline: Option<&'a Array1<f64>>,
        reward_override: Option<&'a Array2<f64>>,
    ) -> Result<Self, EstimatorError> {
        if batch.is_empty() {
            return Err(EstimatorError::EmptyBatch);
        }
        let horizon = batch[0].horizon();
        for (i, t) in batch.iter().enumerate() {
            if t.horizon() != horizon {
                return Err(EstimatorError::HorizonMismatch(i, t.horizon(), horizon));
            }
        }
        let (n_states, n_actions) = theta.theta.dim();
        if let Some(b) = baseline {
            if b.len() != n_states {
                return Err(EstimatorError::BaselineShape(b.len(), n_states));
            }
        }
        if let Some(r) = reward_override {
            if r.dim() != (n_states, n_actions) {
                return Err(EstimatorError::OverrideShape(r.dim(), (n_states, n_actions)));
            }
        }
        Ok(Self {
            batch,
            probs: policy_probs(theta),
            n_states,
            n_actions,
            horizon,
            gamma,
            baseline,
            reward_override,
        })
    }

    fn dim(&self) -> usize {
        self.n_states * self.n_actions
    }

    /// Absolute-discounted returns-to-go G_t, with the reward override
    /// applied if present.
    fn returns(&self, traj: &Trajectory) -> Vec<f64> {
        let mut g = vec![0.0; self.horizon];
        let mut acc = 0.0;
        for t in (0..self.horizon).rev() {
            let step = &traj.steps[t];
            let r = match self.reward_override {
                Some(ov) => ov[[step.state, step.action]],
                None => step.reward,
            };
            acc += self.gamma.powi(t as i32) * r;
            g[t] = acc;
        }
        g
    }

    /// Advantages A_t = G_t - gamma^t Vhat(s_t); plain returns-to-go when no
    /// baseline is supplied.
    fn advantages(&self, traj: &Trajectory, returns: &[f64]) -> Vec<f64> {
        match self.baseline {
            None => returns.to_vec(),
            Some(v) => (0..self.horizon)
                .map(|t| returns[t] - self.gamma.powi(t as i32) * v[traj.steps[t].state])
                .collect(),
        }
    }

    /// Score of step t: nonzero only on the row-`state` block, where entry b
    /// is `[a == b] - pi(b|state)`.
    fn score_row(&self, state: usize, action: usize) -> Vec<f64> {
        (0..self.n_actions)
            .map(|b| (if b == action { 1.0 } else { 0.0 }) - self.probs[[state, b]])
            .collect()
    }

    /// Log-prob Hessian block at `state`: -(diag(pi) - pi pi^T).
    fn log_prob_hessian_block(&self, state: usize) -> Array2<f64> {
        let a_n = self.n_actions;
        let mut block = Array2::zeros((a_n, a_n));
        for b in 0..a_n {
            let pb = self.probs[[state, b]];
            for c in 0..a_n {
                let pc = self.probs[[state, c]];
                block[[b, c]] = pb * pc - if b == c { pb } else { 0.0 };
            }
        }
        block
    }
}

/// Batch-mean policy-gradient estimate. `DiCE` uses raw returns-to-go
/// (REINFORCE); the other kinds use advantages (actor-critic form).
pub fn estimate_policy_gradient(
    kind: EstimatorKind,
    batch: &[Trajectory],
    theta: &PolicyParams,
    gamma: f64,
    baseline: Option<&Array1<f64>>,
    reward_override: Option<&Array2<f64>>,
) -> Result<GradEstimate, EstimatorError> {
    if kind == EstimatorKind::Exact {
        return Err(EstimatorError::ExactKindNotStochastic);
    }
    let baseline = if kind == EstimatorKind::Dice { None } else { baseline };
    let ctx = BatchContext::new(batch, theta, gamma, baseline, reward_override)?;
    let mut acc = Array1::zeros(ctx.dim());
    for traj in ctx.batch {
        let returns = ctx.returns(traj);
        let weights = ctx.advantages(traj, &returns);
        for (t, step) in traj.steps.iter().enumerate() {
            let score = ctx.score_row(step.state, step.action);
            let base = step.state * ctx.n_actions;
            for (b, sc) in score.iter().enumerate() {
                acc[base + b] += weights[t] * sc;
            }
        }
    }
    acc.mapv_inplace(|x| x / batch.len() as f64);
    Ok(GradEstimate {
        value: acc,
        kind,
        batch_size: batch.len(),
    })
}

/// Batch-mean Hessian estimate; see the module docs for the per-kind forms.
pub fn estimate_hessian(
    kind: EstimatorKind,
    batch: &[Trajectory],
    theta: &PolicyParams,
    gamma: f64,
    baseline: Option<&Array1<f64>>,
    reward_override: Option<&Array2<f64>>,
) -> Result<HessianEstimate, EstimatorError> {
    if kind == EstimatorKind::Exact {
        return Err(EstimatorError::ExactKindNotStochastic);
    }
    let baseline = if kind == EstimatorKind::Dice { None } else { baseline };
    let ctx = BatchContext::new(batch, theta, gamma, baseline, reward_override)?;
    let d = ctx.dim();
    let a_n = ctx.n_actions;
    let l_blocks: Vec<Array2<f64>> = (0..ctx.n_states)
        .map(|s| ctx.log_prob_hessian_block(s))
        .collect();
    let mut acc = Array2::zeros((d, d));
    for traj in ctx.batch {
        let returns = ctx.returns(traj);
        // Per-step weights: G_t for DiCE, A_t otherwise.
        let weights = match kind {
            EstimatorKind::Dice => returns.clone(),
            _ => ctx.advantages(traj, &returns),
        };
        let scores: Vec<Vec<f64>> = traj
            .steps
            .iter()
            .map(|st| ctx.score_row(st.state, st.action))
            .collect();
        for t in 0..ctx.horizon {
            let st = traj.steps[t].state;
            let w = weights[t];
            if w != 0.0 {
                // L_t term (cumulative in expectation via the pair weights).
                let block = &l_blocks[st];
                for b in 0..a_n {
                    for c in 0..a_n {
                        acc[[st * a_n + b, st * a_n + c]] += w * block[[b, c]];
                    }
                }
                // Diagonal score outer product s_t s_t^T (not for AD).
                if kind != EstimatorKind::Ad {
                    for b in 0..a_n {
                        let sb = scores[t][b];
                        if sb == 0.0 {
                            continue;
                        }
                        for c in 0..a_n {
                            acc[[st * a_n + b, st * a_n + c]] += w * sb * scores[t][c];
                        }
                    }
                }
            }
            // Cross terms s_u s_t^T + s_t s_u^T for u < t, weighted by the
            // later step (DiCE / Loaded-DiCE only).
            if matches!(kind, EstimatorKind::Dice | EstimatorKind::LoadedDice) && w != 0.0 {
                for u in 0..t {
                    let su = traj.steps[u].state;
                    for b in 0..a_n {
                        let sb = scores[u][b];
                        if sb == 0.0 {
                            continue;
                        }
                        for c in 0..a_n {
                            let v = w * sb * scores[t][c];
                            acc[[su * a_n + b, st * a_n + c]] += v;
                            acc[[st * a_n + c, su * a_n + b]] += v;
                        }
                    }
                }
            }
        }
    }
    acc.mapv_inplace(|x| x / batch.len() as f64);
    Ok(HessianEstimate {
        value: acc,
        kind,
        batch_size: batch.len(),
    })
}

/// Batch-mean estimate of the mixed reward/policy derivative
/// `J[(s,a)][q] = d^2 V / d phi_(s,a) d theta_q` under reward `R + phi`:
/// per trajectory `sum_t (dG_t/dphi) (x) s_t` with
/// `dG_t/dphi(s,a) = sum_{u>=t} gamma^u [s_u=s, a_u=a]`.
///
/// The formula is identical for every stochastic kind: a state baseline has
/// no reward dependence, so its contribution to the mixed derivative is
/// exactly zero and only the indicator structure remains.
pub fn estimate_reward_jacobian(
    kind: EstimatorKind,
    batch: &[Trajectory],
    theta: &PolicyParams,
    gamma: f64,
    _baseline: Option<&Array1<f64>>,
) -> Result<JacobianEstimate, EstimatorError> {
    if kind == EstimatorKind::Exact {
        return Err(EstimatorError::ExactKindNotStochastic);
    }
    let ctx = BatchContext::new(batch, theta, gamma, None, None)?;
    let d = ctx.dim();
    let a_n = ctx.n_actions;
    let mut acc = Array2::zeros((d, d));
    for traj in ctx.batch {
        for t in 0..ctx.horizon {
            let st = traj.steps[t].state;
            let score = ctx.score_row(st, traj.steps[t].action);
            for u in t..ctx.horizon {
                let row = traj.steps[u].state * a_n + traj.steps[u].action;
                let disc = gamma.powi(u as i32);
                for (b, sc) in score.iter().enumerate() {
                    acc[[row, st * a_n + b]] += disc * sc;
                }
            }
        }
    }
    acc.mapv_inplace(|x| x / batch.len() as f64);
    Ok(JacobianEstimate {
        value: acc,
        kind,
        batch_size: batch.len(),
    })
}

/// Off-policy first-order estimate from trajectories sampled under a
/// behavior policy mu (cached in `log_probs`): per trajectory
/// `sum_t w_t gamma^t r_t S_t` with the cumulative prefix ratio
/// `w_t = prod_{u<=t} pi_theta(a_u|s_u) / mu(a_u|s_u)`. Per-step ratios are
/// optionally clipped from above at `clip`.
pub fn importance_weighted_gradient(
    batch: &[Trajectory],
    theta: &PolicyParams,
    gamma: f64,
    clip: Option<f64>,
    reward_override: Option<&Array2<f64>>,
) -> Result<GradEstimate, EstimatorError> {
    let ctx = BatchContext::new(batch, theta, gamma, None, reward_override)?;
    for (i, t) in batch.iter().enumerate() {
        if t.log_probs.is_none() {
            return Err(EstimatorError::MissingLogProbs(i));
        }
    }
    let d = ctx.dim();
    let a_n = ctx.n_actions;
    let mut acc = Array1::zeros(d);
    let mut cum_score = vec![0.0; d];
    for traj in ctx.batch {
        let behavior = traj.log_probs.as_ref().expect("checked above");
        cum_score.iter_mut().for_each(|x| *x = 0.0);
        let mut w = 1.0;
        for (t, step) in traj.steps.iter().enumerate() {
            let log_pi = ctx.probs[[step.state, step.action]].ln();
            let mut ratio = (log_pi - behavior[t]).exp();
            if let Some(c) = clip {
                ratio = ratio.min(c);
            }
            w *= ratio;
            let score = ctx.score_row(step.state, step.action);
            let base = step.state * a_n;
            for (b, sc) in score.iter().enumerate() {
                cum_score[base + b] += sc;
            }
            let r = match ctx.reward_override {
                Some(ov) => ov[[step.state, step.action]],
                None => step.reward,
            };
            let coeff = w * gamma.powi(t as i32) * r;
            if coeff != 0.0 {
                for k in 0..d {
                    acc[k] += coeff * cum_score[k];
                }
            }
        }
    }
    acc.mapv_inplace(|x| x / batch.len() as f64);
    Ok(GradEstimate {
        value: acc,
        kind: EstimatorKind::Dice,
        batch_size: batch.len(),
    })
}
