//! Meta-gradient estimation laboratory on tabular MDPs.
//!
//! The crate is organised around four layers:
//!
//! * [`mdp`] — tabular MDP generation, softmax policies, trajectory sampling,
//!   and exact (dynamic-programming) value / gradient / Hessian /
//!   reward-Jacobian computation.
//! * [`estimators`] — stochastic first- and second-order estimators built
//!   from trajectory batches (DiCE, Loaded-DiCE, LVC, AD) plus an
//!   importance-weighted off-policy gradient.
//! * [`oracle`] — exhaustive trajectory enumeration on tiny MDPs, the
//!   brute-force ground truth used by the test suites.
//! * [`meta`] — K-step inner-loop meta-gradient machinery: the exact
//!   meta-gradient, its stochastic counterpart with a three-way estimator
//!   decomposition, and bias/variance/correlation measurement.

pub mod estimators;
pub mod gradcheck;
pub mod mdp;
pub mod meta;
pub mod oracle;
pub mod rng;

pub use estimators::{
    estimate_hessian, estimate_policy_gradient, estimate_reward_jacobian,
    importance_weighted_gradient, EstimatorError, EstimatorKind, GradEstimate, HessianEstimate,
    JacobianEstimate,
};
pub use mdp::{
    exact_policy_gradient, exact_policy_hessian, exact_reward_jacobian, exact_value,
    generate_random_mdp, noisy_value_table, policy_probs, sample_trajectories, MdpError,
    PolicyParams, Step, TabularMdp, Trajectory,
};
pub use meta::{
    correlation, estimate_meta_gradient, exact_inner_loop, exact_meta_gradient, measure,
    measure_compositional_bias, measure_problem, AggregateReport, EstimatorAssignment,
    HessianBiasInjection, InnerLoopConfig, MdpParams, MetaError, MetaGradReport, MetaProblem,
    MetaVariant, PathEstimator,
};
pub use oracle::{enumerate, expected_matrix, expected_scalar, expected_vector, OracleError};
