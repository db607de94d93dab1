//! The iterated prisoner's dilemma with memory-1 sigmoid policies, and
//! exact value / gradient / mixed-derivative computation through the
//! resolvent of the induced 4-state joint-action chain.
//!
//! Action convention: action 1 is "cooperate" (mutual play of 1 yields the
//! social-welfare payoff -1 per step), action 0 is "defect" (a unilateral
//! defector collects 0 while the cooperator is exploited at -3). Payoff
//! matrices are indexed `[own_action][other_action]`.
//!
//! Each agent conditions on 5 states: index 0 before the first move, then
//! `1 + 2*own_prev + other_prev` for the four previous joint actions.

use ndarray::{Array1, Array2};
use thiserror::Error;

pub const N_POLICY_STATES: usize = 5;
const N_JOINT: usize = 4;

#[derive(Debug, Error)]
pub enum LolaError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("replay buffer is empty")]
    EmptyBuffer,
}

/// Payoffs, discount, and rollout length of one game configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct IpdGame {
    pub payoff_1: [[f64; 2]; 2],
    pub payoff_2: [[f64; 2]; 2],
    pub discount: f64,
    pub rollout_length: usize,
}

impl IpdGame {
    /// The standard prisoner's dilemma: discount 0.96, rollouts of 100
    /// steps, payoffs (in `[own][other]` order) giving (-1,-1) for mutual
    /// cooperation and (-2,-2) for mutual defection.
    pub fn standard() -> Self {
        let payoff = [[-2.0, 0.0], [-3.0, -1.0]];
        Self {
            payoff_1: payoff,
            payoff_2: payoff,
            discount: 0.96,
            rollout_length: 100,
        }
    }

    pub fn reward_1(&self, a1: usize, a2: usize) -> f64 {
        self.payoff_1[a1][a2]
    }

    pub fn reward_2(&self, a1: usize, a2: usize) -> f64 {
        self.payoff_2[a2][a1]
    }
}

/// Memory-1 policy: five logits, one per conditioning state;
/// cooperate-probability is the logistic of the logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory1Policy {
    pub logits: [f64; N_POLICY_STATES],
}

impl Memory1Policy {
    pub fn uniform() -> Self {
        Self { logits: [0.0; 5] }
    }

    pub fn cooperate_prob(&self, state: usize) -> f64 {
        sigmoid(self.logits[state])
    }

    /// log pi(a | state), computed through softplus for stability at
    /// saturated logits.
    pub fn log_prob(&self, state: usize, action: usize) -> f64 {
        let x = self.logits[state];
        if action == 1 {
            -softplus(-x)
        } else {
            -softplus(x)
        }
    }

    /// d log pi(a|state) / d logit[state] = a - sigma(logit).
    pub fn score(&self, state: usize, action: usize) -> f64 {
        action as f64 - self.cooperate_prob(state)
    }

    pub fn ascend(&self, grad: &Array1<f64>, lr: f64) -> Memory1Policy {
        let mut logits = self.logits;
        for (k, l) in logits.iter_mut().enumerate() {
            *l += lr * grad[k];
        }
        Memory1Policy { logits }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Agent-1's conditioning index after joint action (a1, a2).
pub fn next_state(a1: usize, a2: usize) -> usize {
    1 + 2 * a1 + a2
}

/// Agent-2's conditioning index for a given agent-1 index (swap the roles
/// of own and other in the previous joint action).
pub fn partner_state(state_1: usize) -> usize {
    if state_1 == 0 {
        0
    } else {
        let j = state_1 - 1;
        let (a1, a2) = (j / 2, j % 2);
        1 + 2 * a2 + a1
    }
}

/// Per-agent action probabilities over the 4 joint-action chain states plus
/// the initial state, with derivative factors d pi(1|s)/d logit.
struct ChainFactors {
    // coop[agent][state_1_index (0..5)] = P(action 1)
    coop: [[f64; N_POLICY_STATES]; 2],
    dcoop: [[f64; N_POLICY_STATES]; 2],
}

fn chain_factors(p1: &Memory1Policy, p2: &Memory1Policy) -> ChainFactors {
    let mut coop = [[0.0; N_POLICY_STATES]; 2];
    let mut dcoop = [[0.0; N_POLICY_STATES]; 2];
    for s in 0..N_POLICY_STATES {
        let c1 = p1.cooperate_prob(s);
        coop[0][s] = c1;
        dcoop[0][s] = c1 * (1.0 - c1);
        let c2 = p2.cooperate_prob(s);
        coop[1][s] = c2;
        dcoop[1][s] = c2 * (1.0 - c2);
    }
    ChainFactors { coop, dcoop }
}

// pi_i(a | own conditioning state), and its logit derivative.
fn action_prob(coop: f64, action: usize) -> f64 {
    if action == 1 {
        coop
    } else {
        1.0 - coop
    }
}

fn action_prob_deriv(dcoop: f64, action: usize) -> f64 {
    if action == 1 {
        dcoop
    } else {
        -dcoop
    }
}

/// The joint-action chain: initial distribution p0[j], transition M[j][j'],
/// j = 2*a1 + a2, and the conditioning-state indices per agent.
fn joint_chain(f: &ChainFactors) -> (Array1<f64>, Array2<f64>) {
    let mut p0 = Array1::zeros(N_JOINT);
    for a1 in 0..2 {
        for a2 in 0..2 {
            p0[2 * a1 + a2] = action_prob(f.coop[0][0], a1) * action_prob(f.coop[1][0], a2);
        }
    }
    let mut m = Array2::zeros((N_JOINT, N_JOINT));
    for j in 0..N_JOINT {
        let s1 = 1 + j;
        let s2 = partner_state(s1);
        for b1 in 0..2 {
            for b2 in 0..2 {
                m[[j, 2 * b1 + b2]] =
                    action_prob(f.coop[0][s1], b1) * action_prob(f.coop[1][s2], b2);
            }
        }
    }
    (p0, m)
}

/// Gauss-Jordan inverse; I - gamma*M is strictly diagonally dominant for
/// gamma < 1, so no conditioning trouble arises.
fn invert4(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut work = a.clone();
    let mut inv = Array2::eye(n);
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if work[[r, col]].abs() > work[[pivot, col]].abs() {
                pivot = r;
            }
        }
        if pivot != col {
            for c in 0..n {
                work.swap([col, c], [pivot, c]);
                inv.swap([col, c], [pivot, c]);
            }
        }
        let p = work[[col, col]];
        for c in 0..n {
            work[[col, c]] /= p;
            inv[[col, c]] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = work[[r, col]];
            if factor == 0.0 {
                continue;
            }
            for c in 0..n {
                let wc = work[[col, c]];
                let ic = inv[[col, c]];
                work[[r, c]] -= factor * wc;
                inv[[r, c]] -= factor * ic;
            }
        }
    }
    inv
}

/// All exact first- and second-order quantities of one agent's value on the
/// discounted-sum scale: v = p0^T (I - gamma M)^-1 r.
pub struct ValueDerivs {
    /// Discounted-sum value.
    pub value: f64,
    /// Gradient with respect to agent 1's logits.
    pub grad_1: Array1<f64>,
    /// Gradient with respect to agent 2's logits.
    pub grad_2: Array1<f64>,
    /// Mixed derivative d^2 v / d logits_1 d logits_2, rows agent 1.
    pub cross: Array2<f64>,
}

/// Exact derivatives of agent `which`'s value (1 or 2) on the
/// discounted-sum scale.
pub fn value_derivs_sum(
    game: &IpdGame,
    p1: &Memory1Policy,
    p2: &Memory1Policy,
    which: usize,
) -> ValueDerivs {
    let f = chain_factors(p1, p2);
    let (p0, m) = joint_chain(&f);
    let gamma = game.discount;
    let n = N_POLICY_STATES;

    let mut r = Array1::zeros(N_JOINT);
    for a1 in 0..2 {
        for a2 in 0..2 {
            r[2 * a1 + a2] = if which == 1 {
                game.reward_1(a1, a2)
            } else {
                game.reward_2(a1, a2)
            };
        }
    }

    let x = {
        let mut eye = Array2::eye(N_JOINT);
        eye.scaled_add(-gamma, &m);
        eye
    };
    let y = invert4(&x);
    let yr = y.dot(&r); // (I - gamma M)^-1 r
    let py = y.t().dot(&p0); // row vector p0^T Y, stored as a column

    let value = p0.dot(&yr);

    // First derivatives of p0 and M per (agent, logit index).
    // dp0[agent][k] is a 4-vector, dm[agent][k] a 4x4 matrix.
    let mut dp0 = vec![vec![Array1::<f64>::zeros(N_JOINT); n]; 2];
    let mut dm = vec![vec![Array2::<f64>::zeros((N_JOINT, N_JOINT)); n]; 2];
    for a1 in 0..2 {
        for a2 in 0..2 {
            let j = 2 * a1 + a2;
            dp0[0][0][j] = action_prob_deriv(f.dcoop[0][0], a1) * action_prob(f.coop[1][0], a2);
            dp0[1][0][j] = action_prob(f.coop[0][0], a1) * action_prob_deriv(f.dcoop[1][0], a2);
        }
    }
    for j in 0..N_JOINT {
        let s1 = 1 + j;
        let s2 = partner_state(s1);
        for b1 in 0..2 {
            for b2 in 0..2 {
                let col = 2 * b1 + b2;
                dm[0][s1][[j, col]] =
                    action_prob_deriv(f.dcoop[0][s1], b1) * action_prob(f.coop[1][s2], b2);
                dm[1][s2][[j, col]] =
                    action_prob(f.coop[0][s1], b1) * action_prob_deriv(f.dcoop[1][s2], b2);
            }
        }
    }

    let grad_of = |agent: usize| -> Array1<f64> {
        let mut g = Array1::zeros(n);
        for k in 0..n {
            g[k] = dp0[agent][k].dot(&yr) + gamma * py.dot(&dm[agent][k].dot(&yr));
        }
        g
    };
    let grad_1 = grad_of(0);
    let grad_2 = grad_of(1);

    // Mixed second derivative: u runs over agent-1 logits, w over agent-2.
    // d^2 v = d2p0.yr + du(p0).Y.dw(M).yr + dw(p0).Y.du(M).yr
    //       + p0.Y.d2M.yr + gamma terms with both dM factors.
    let mut cross = Array2::zeros((n, n));
    for u in 0..n {
        let du_m_yr = dm[0][u].dot(&yr);
        let y_du_m_yr = y.dot(&du_m_yr);
        let du_p0_y = y.t().dot(&dp0[0][u]);
        for w in 0..n {
            let mut val = 0.0;
            // d^2 p0: only the (0,0) logit pair touches the first move.
            if u == 0 && w == 0 {
                let mut d2p0 = Array1::zeros(N_JOINT);
                for a1 in 0..2 {
                    for a2 in 0..2 {
                        d2p0[2 * a1 + a2] = action_prob_deriv(f.dcoop[0][0], a1)
                            * action_prob_deriv(f.dcoop[1][0], a2);
                    }
                }
                val += d2p0.dot(&yr);
            }
            let dw_m_yr = dm[1][w].dot(&yr);
            val += gamma * du_p0_y.dot(&dw_m_yr);
            val += gamma * dp0[1][w].dot(&y_du_m_yr);
            // d^2 M: rows j where agent 1 conditions on u and agent 2 on w.
            if u >= 1 {
                let j = u - 1;
                let s2 = partner_state(u);
                if s2 == w {
                    let mut row = 0.0;
                    for b1 in 0..2 {
                        for b2 in 0..2 {
                            row += action_prob_deriv(f.dcoop[0][u], b1)
                                * action_prob_deriv(f.dcoop[1][w], b2)
                                * yr[2 * b1 + b2];
                        }
                    }
                    val += gamma * py[j] * row;
                }
            }
            val += gamma * gamma * py.dot(&dm[0][u].dot(&y.dot(&dw_m_yr)));
            val += gamma * gamma * py.dot(&dm[1][w].dot(&y_du_m_yr));
            cross[[u, w]] = val;
        }
    }

    ValueDerivs {
        value,
        grad_1,
        grad_2,
        cross,
    }
}

/// Per-step-normalized joint values (1-gamma) * p0^T (I - gamma M)^-1 r_i.
pub fn exact_joint_value(game: &IpdGame, p1: &Memory1Policy, p2: &Memory1Policy) -> (f64, f64) {
    let scale = 1.0 - game.discount;
    let v1 = value_derivs_sum(game, p1, p2, 1).value * scale;
    let v2 = value_derivs_sum(game, p1, p2, 2).value * scale;
    (v1, v2)
}

/// Exact per-step-scale derivatives: the gradient of v1 with respect to
/// agent 1's logits, the gradient of v2 with respect to agent 2's logits,
/// and the mixed derivative of v2 (rows: agent-1 logits).
pub fn exact_value_gradients(
    game: &IpdGame,
    p1: &Memory1Policy,
    p2: &Memory1Policy,
) -> (Array1<f64>, Array1<f64>, Array2<f64>) {
    let scale = 1.0 - game.discount;
    let d1 = value_derivs_sum(game, p1, p2, 1);
    let d2 = value_derivs_sum(game, p1, p2, 2);
    (d1.grad_1 * scale, d2.grad_2 * scale, d2.cross * scale)
}
