//! LOLA on the iterated prisoner's dilemma: memory-1 policies, exact
//! resolvent values and derivatives, causal DiCE estimation with per-state
//! baselines, and an off-policy (importance-weighted) correction backed by
//! a replay buffer.

pub mod dice;
pub mod game;
pub mod train;

pub use dice::{
    dice_grads, off_policy_dice_grads, rollout, DiceGrads, JointRollout, ReplayBuffer, ValueTables,
};
pub use game::{
    exact_joint_value, exact_value_gradients, next_state, partner_state, value_derivs_sum,
    IpdGame, LolaError, Memory1Policy, N_POLICY_STATES,
};
pub use train::{
    lola_step, mean_final_return, run_lola_experiment, LolaAssignment, LolaConfig, LolaPath,
    LolaRun, LolaState,
};
