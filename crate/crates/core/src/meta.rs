//! K-step inner-loop meta-gradient machinery.
//!
//! The bilevel objective maximises an outer value J_out(theta_K) where
//! theta_K is produced by K policy-gradient ascent steps on an inner value.
//! Two problem shapes are supported:
//!
//! * `Maml`  — the meta-variable is the initial policy theta_0 itself; the
//!   inner objective is the plain value V(theta).
//! * `Lirpg` — the meta-variable is an intrinsic reward matrix phi; the
//!   inner loop ascends V under reward R + phi while the outer value uses
//!   the original R.
//!
//! The meta-gradient is forward-accumulated: maintain D_i = d theta_i / d phi
//! (identity for `Maml`, zero for `Lirpg`) with
//! `D_{i+1} = D_i (I + alpha H_i) + alpha J_i`, where H_i is the inner
//! Hessian and J_i the mixed reward/policy Jacobian (zero for `Maml`), and
//! finish with `D_K * grad V(theta_K)`. The estimated variant drives each of
//! the three paths — iterates, curvature, outer gradient — with its own
//! estimator and fresh batches, which is how the estimator-decomposition
//! experiments isolate the two bias sources.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::estimators::{
    estimate_hessian, estimate_policy_gradient, estimate_reward_jacobian, EstimatorError,
    EstimatorKind,
};
use crate::mdp::{
    exact_policy_gradient, exact_policy_hessian, exact_reward_jacobian, generate_random_mdp,
    noisy_value_table, sample_trajectories, MdpError, PolicyParams, TabularMdp,
};
use crate::rng::{derive, derive2, rng_from_seed};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("assignment code must be three letters from {{S,E}}, got {0:?}")]
    InvalidCode(String),
    #[error("stochastic path estimator needs batch_size >= 1")]
    InvalidBatchSize,
    #[error("meta params must have shape {expected:?}, got {got:?}")]
    MetaShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("correlation is undefined for a zero vector")]
    ZeroVector,
    #[error("correlation needs equal dimensions, got {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error("variance estimation needs at least 2 trials")]
    NeedTwoTrials,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaVariant {
    Maml,
    Lirpg,
}

/// A meta-learning problem instance over one tabular MDP.
#[derive(Debug, Clone)]
pub struct MetaProblem {
    pub variant: MetaVariant,
    pub mdp: TabularMdp,
    /// theta_0 for `Maml`, the intrinsic reward matrix phi for `Lirpg`.
    pub meta_params: Array2<f64>,
    pub theta0: PolicyParams,
}

impl MetaProblem {
    /// MAML: the meta-variable is the initial policy.
    pub fn maml(mdp: TabularMdp, theta0: PolicyParams) -> Result<Self, MetaError> {
        check_shape(&mdp, theta0.theta.dim())?;
        Ok(Self {
            variant: MetaVariant::Maml,
            meta_params: theta0.theta.clone(),
            mdp,
            theta0,
        })
    }

    /// LIRPG: the meta-variable is an intrinsic reward matrix added to the
    /// environment reward in the inner loop only.
    pub fn lirpg(
        mdp: TabularMdp,
        theta0: PolicyParams,
        intrinsic_reward: Array2<f64>,
    ) -> Result<Self, MetaError> {
        check_shape(&mdp, theta0.theta.dim())?;
        check_shape(&mdp, intrinsic_reward.dim())?;
        Ok(Self {
            variant: MetaVariant::Lirpg,
            meta_params: intrinsic_reward,
            mdp,
            theta0,
        })
    }

    /// Reward override for the inner objective: `R + phi` for LIRPG, the
    /// plain environment reward (no override) for MAML.
    pub fn inner_reward(&self) -> Option<Array2<f64>> {
        match self.variant {
            MetaVariant::Maml => None,
            MetaVariant::Lirpg => Some(&self.mdp.reward + &self.meta_params),
        }
    }
}

fn check_shape(mdp: &TabularMdp, got: (usize, usize)) -> Result<(), MetaError> {
    let expected = (mdp.n_states, mdp.n_actions);
    if got != expected {
        return Err(MetaError::MetaShape { expected, got });
    }
    Ok(())
}

/// Fixed symmetric error matrix added to every Hessian estimate, scaled by
/// `coefficient`; used to inject a controlled amount of curvature bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HessianBiasInjection {
    pub coefficient: f64,
    pub perturbation_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerLoopConfig {
    pub k_steps: usize,
    pub learning_rate: f64,
    /// Noise coefficient of the simulated value function used as the
    /// actor-critic baseline by stochastic estimators.
    pub baseline_noise: f64,
    pub hessian_bias_injection: Option<HessianBiasInjection>,
}

impl InnerLoopConfig {
    pub fn new(k_steps: usize, learning_rate: f64) -> Self {
        Self {
            k_steps,
            learning_rate,
            baseline_noise: 1.0,
            hessian_bias_injection: None,
        }
    }
}

impl Default for InnerLoopConfig {
    /// Defaults: one inner step at learning rate 10, unit baseline noise.
    fn default() -> Self {
        Self::new(1, 10.0)
    }
}

/// One of the three estimation paths: either the exact analytic quantity or
/// a stochastic estimator with its batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathEstimator {
    pub kind: EstimatorKind,
    pub batch_size: usize,
}

impl PathEstimator {
    pub fn exact() -> Self {
        Self {
            kind: EstimatorKind::Exact,
            batch_size: 0,
        }
    }

    pub fn stochastic(kind: EstimatorKind, batch_size: usize) -> Result<Self, MetaError> {
        if kind == EstimatorKind::Exact {
            return Err(MetaError::InvalidCode("stochastic path given Exact".into()));
        }
        if batch_size == 0 {
            return Err(MetaError::InvalidBatchSize);
        }
        Ok(Self { kind, batch_size })
    }

    pub fn is_exact(&self) -> bool {
        self.kind == EstimatorKind::Exact
    }
}

/// The (I, II, III) estimator triple: I drives the iterate path, II the
/// Hessian/Jacobian accumulation, III the outer gradient. Encoded as a
/// three-letter S/E code, e.g. "SEE" = stochastic iterates, exact curvature,
/// exact outer gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstimatorAssignment {
    pub compositional: PathEstimator,
    pub curvature: PathEstimator,
    pub outer: PathEstimator,
}

impl EstimatorAssignment {
    pub fn exact() -> Self {
        Self {
            compositional: PathEstimator::exact(),
            curvature: PathEstimator::exact(),
            outer: PathEstimator::exact(),
        }
    }

    /// Builds an assignment from a 3-letter code, using `kind`/`batch_size`
    /// for every stochastic path.
    pub fn from_code(
        code: &str,
        kind: EstimatorKind,
        batch_size: usize,
    ) -> Result<Self, MetaError> {
        let chars: Vec<char> = code.chars().collect();
        if chars.len() != 3 {
            return Err(MetaError::InvalidCode(code.to_string()));
        }
        let mut paths = [PathEstimator::exact(); 3];
        for (i, c) in chars.iter().enumerate() {
            paths[i] = match c {
                'E' | 'e' => PathEstimator::exact(),
                'S' | 's' => PathEstimator::stochastic(kind, batch_size)?,
                _ => return Err(MetaError::InvalidCode(code.to_string())),
            };
        }
        Ok(Self {
            compositional: paths[0],
            curvature: paths[1],
            outer: paths[2],
        })
    }

    pub fn code(&self) -> String {
        [self.compositional, self.curvature, self.outer]
            .iter()
            .map(|p| if p.is_exact() { 'E' } else { 'S' })
            .collect()
    }
}

/// Per-configuration statistics of a stochastic meta-gradient against the
/// exact one.
#[derive(Debug, Clone)]
pub struct MetaGradReport {
    pub exact_grad: Array1<f64>,
    pub mean_estimate: Array1<f64>,
    /// ||E ghat - g||.
    pub bias_norm: f64,
    /// E ||ghat - E ghat||^2, estimated with the unbiased (n-1) divisor.
    pub variance: f64,
    /// Mean over trials of the cosine similarity Acc(ghat, g).
    pub mean_correlation: f64,
    pub estimates: Vec<Array1<f64>>,
    pub n_trials: usize,
}

/// Aggregation of [`MetaGradReport`]s over independently generated MDPs.
#[derive(Debug, Clone)]
pub struct AggregateReport {
    pub per_mdp: Vec<MetaGradReport>,
    pub mdp_seeds: Vec<u64>,
    pub trial_seeds: Vec<u64>,
    pub pooled_bias_norm: f64,
    pub pooled_variance: f64,
    pub pooled_correlation: f64,
}

/// Random-MDP generation parameters shared by the measurement sweeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdpParams {
    pub n_states: usize,
    pub n_actions: usize,
    pub density: f64,
    pub horizon: usize,
    pub discount: f64,
}

impl Default for MdpParams {
    /// 20 states, 5 actions, Dirichlet density 1e-3, horizon 20,
    /// discount 0.8.
    fn default() -> Self {
        Self {
            n_states: 20,
            n_actions: 5,
            density: 0.001,
            horizon: 20,
            discount: 0.8,
        }
    }
}

impl MdpParams {
    pub fn generate(&self, seed: u64) -> Result<TabularMdp, MdpError> {
        generate_random_mdp(
            seed,
            self.n_states,
            self.n_actions,
            self.density,
            self.horizon,
            self.discount,
        )
    }
}

// Seed stream tags for the independent batches of one meta-gradient sample.
const TAG_COMP_BATCH: u64 = 1;
const TAG_COMP_BASE: u64 = 2;
const TAG_CURV_H_BATCH: u64 = 3;
const TAG_CURV_H_BASE: u64 = 4;
const TAG_CURV_J_BATCH: u64 = 5;
const TAG_OUT_BATCH: u64 = 6;
const TAG_OUT_BASE: u64 = 7;
const TAG_MDP: u64 = 101;
const TAG_TRIALS: u64 = 102;
const TAG_TRIAL: u64 = 103;

/// Deterministic inner-loop iterates theta_0 .. theta_K under exact policy
/// gradients on the inner objective. Returns K+1 entries.
pub fn exact_inner_loop(
    problem: &MetaProblem,
    config: &InnerLoopConfig,
) -> Result<Vec<PolicyParams>, MetaError> {
    let r_in = problem.inner_reward();
    let mut iterates = Vec::with_capacity(config.k_steps + 1);
    iterates.push(problem.theta0.clone());
    for i in 0..config.k_steps {
        let g = exact_policy_gradient(&problem.mdp, &iterates[i], r_in.as_ref())?;
        iterates.push(iterates[i].add_flat(&g, config.learning_rate));
    }
    Ok(iterates)
}

/// The exact meta-gradient by forward accumulation (any Hessian-bias
/// injection in `config` is ignored: this is the ground truth).
pub fn exact_meta_gradient(
    problem: &MetaProblem,
    config: &InnerLoopConfig,
) -> Result<Array1<f64>, MetaError> {
    let mut cfg = config.clone();
    cfg.hessian_bias_injection = None;
    estimate_meta_gradient(problem, &cfg, &EstimatorAssignment::exact(), 0)
}

/// One stochastic meta-gradient sample. Each path draws fresh, independent
/// batches per inner step, all derived from `master_seed`; an "EEE"
/// assignment reproduces the exact meta-gradient bit for bit.
pub fn estimate_meta_gradient(
    problem: &MetaProblem,
    config: &InnerLoopConfig,
    assignment: &EstimatorAssignment,
    master_seed: u64,
) -> Result<Array1<f64>, MetaError> {
    let mdp = &problem.mdp;
    let gamma = mdp.discount;
    let alpha = config.learning_rate;
    let d = mdp.param_dim();
    let r_in = problem.inner_reward();
    let is_lirpg = problem.variant == MetaVariant::Lirpg;

    let injection = config
        .hessian_bias_injection
        .filter(|inj| inj.coefficient != 0.0);
    let perturbation = injection.map(|inj| symmetric_unit_perturbation(d, inj.perturbation_seed));

    let mut theta = problem.theta0.clone();
    let mut dmat: Array2<f64> = match problem.variant {
        MetaVariant::Maml => Array2::eye(d),
        MetaVariant::Lirpg => Array2::zeros((d, d)),
    };

    for i in 0..config.k_steps {
        // Curvature path (estimator II): Hessian, plus the reward Jacobian
        // for LIRPG, both evaluated at the current iterate.
        let mut hess = match assignment.curvature.kind {
            EstimatorKind::Exact => exact_policy_hessian(mdp, &theta, r_in.as_ref())?,
            kind => {
                let batch = sample_trajectories(
                    mdp,
                    &theta,
                    assignment.curvature.batch_size,
                    derive2(master_seed, TAG_CURV_H_BATCH, i as u64),
                );
                let baseline = baseline_for(
                    kind,
                    mdp,
                    &theta,
                    config.baseline_noise,
                    derive2(master_seed, TAG_CURV_H_BASE, i as u64),
                )?;
                estimate_hessian(kind, &batch, &theta, gamma, baseline.as_ref(), r_in.as_ref())?
                    .value
            }
        };
        if let (Some(inj), Some(delta)) = (injection, perturbation.as_ref()) {
            hess.scaled_add(inj.coefficient, delta);
        }
        dmat = &dmat + &(dmat.dot(&hess) * alpha);
        if is_lirpg {
            let jac = match assignment.curvature.kind {
                EstimatorKind::Exact => exact_reward_jacobian(mdp, &theta, r_in.as_ref())?,
                kind => {
                    let batch = sample_trajectories(
                        mdp,
                        &theta,
                        assignment.curvature.batch_size,
                        derive2(master_seed, TAG_CURV_J_BATCH, i as u64),
                    );
                    estimate_reward_jacobian(kind, &batch, &theta, gamma, None)?.value
                }
            };
            dmat.scaled_add(alpha, &jac);
        }

        // Iterate path (estimator I).
        let grad = match assignment.compositional.kind {
            EstimatorKind::Exact => exact_policy_gradient(mdp, &theta, r_in.as_ref())?,
            kind => {
                let batch = sample_trajectories(
                    mdp,
                    &theta,
                    assignment.compositional.batch_size,
                    derive2(master_seed, TAG_COMP_BATCH, i as u64),
                );
                let baseline = baseline_for(
                    kind,
                    mdp,
                    &theta,
                    config.baseline_noise,
                    derive2(master_seed, TAG_COMP_BASE, i as u64),
                )?;
                estimate_policy_gradient(
                    kind,
                    &batch,
                    &theta,
                    gamma,
                    baseline.as_ref(),
                    r_in.as_ref(),
                )?
                .value
            }
        };
        theta = theta.add_flat(&grad, alpha);
    }

    // Outer gradient (estimator III) under the original reward.
    let g_out = match assignment.outer.kind {
        EstimatorKind::Exact => exact_policy_gradient(mdp, &theta, None)?,
        kind => {
            let batch = sample_trajectories(
                mdp,
                &theta,
                assignment.outer.batch_size,
                derive(master_seed, TAG_OUT_BATCH),
            );
            let baseline = baseline_for(
                kind,
                mdp,
                &theta,
                config.baseline_noise,
                derive(master_seed, TAG_OUT_BASE),
            )?;
            estimate_policy_gradient(kind, &batch, &theta, gamma, baseline.as_ref(), None)?.value
        }
    };
    Ok(dmat.dot(&g_out))
}

fn baseline_for(
    kind: EstimatorKind,
    mdp: &TabularMdp,
    theta: &PolicyParams,
    noise: f64,
    seed: u64,
) -> Result<Option<Array1<f64>>, MetaError> {
    if kind.uses_baseline() {
        Ok(Some(noisy_value_table(mdp, theta, noise, seed)?))
    } else {
        Ok(None)
    }
}

/// Random symmetric matrix with unit spectral norm, deterministic in `seed`.
fn symmetric_unit_perturbation(d: usize, seed: u64) -> Array2<f64> {
    use rand_distr::{Distribution, Normal};
    let mut rng = rng_from_seed(seed);
    let normal: Normal<f64> = Normal::new(0.0, 1.0).expect("valid normal");
    let g = Array2::from_shape_fn((d, d), |_| normal.sample(&mut rng));
    let mut sym = (&g + &g.t()) * 0.5;
    // Power iteration for the spectral norm (= max |eigenvalue|).
    let mut v = Array1::from_shape_fn(d, |_| normal.sample(&mut rng));
    let init = v.dot(&v).sqrt();
    v.mapv_inplace(|x| x / init);
    let mut sigma = 0.0;
    for _ in 0..300 {
        let w = sym.dot(&v);
        sigma = w.dot(&w).sqrt();
        if sigma == 0.0 {
            break;
        }
        v = w / sigma;
    }
    if sigma > 0.0 {
        sym.mapv_inplace(|x| x / sigma);
    }
    sym
}

/// Cosine similarity Acc(x, y) = x.y / (|x| |y|), in [-1, 1].
///
/// Bitwise-identical vectors short-circuit to exactly 1.0 so that perfect
/// estimators report perfect correlation without rounding residue.
pub fn correlation(x: &Array1<f64>, y: &Array1<f64>) -> Result<f64, MetaError> {
    if x.len() != y.len() {
        return Err(MetaError::DimensionMismatch(x.len(), y.len()));
    }
    let nx = x.dot(x).sqrt();
    let ny = y.dot(y).sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(MetaError::ZeroVector);
    }
    if x == y {
        return Ok(1.0);
    }
    Ok((x.dot(y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Runs `n_trials` estimates on one problem from the same theta_0, compares
/// against [`exact_meta_gradient`], and reports bias / variance / mean Acc.
pub fn measure_problem(
    problem: &MetaProblem,
    config: &InnerLoopConfig,
    assignment: &EstimatorAssignment,
    n_trials: usize,
    seed: u64,
) -> Result<MetaGradReport, MetaError> {
    if n_trials < 2 {
        return Err(MetaError::NeedTwoTrials);
    }
    let exact = exact_meta_gradient(problem, config)?;
    let d = exact.len();
    let mut estimates = Vec::with_capacity(n_trials);
    for t in 0..n_trials {
        estimates.push(estimate_meta_gradient(
            problem,
            config,
            assignment,
            derive2(seed, TAG_TRIAL, t as u64),
        )?);
    }
    // Work with deviations from the exact gradient so that exact assignments
    // report bias and variance of exactly zero.
    let mut mean_dev = Array1::<f64>::zeros(d);
    for est in &estimates {
        mean_dev = mean_dev + (est - &exact);
    }
    mean_dev.mapv_inplace(|x| x / n_trials as f64);
    let bias_norm = mean_dev.dot(&mean_dev).sqrt();
    let mean_estimate = &exact + &mean_dev;
    let mut variance = 0.0;
    for est in &estimates {
        let dev = est - &mean_estimate;
        variance += dev.dot(&dev);
    }
    variance /= (n_trials - 1) as f64;
    let mut mean_correlation = 0.0;
    for est in &estimates {
        mean_correlation += correlation(est, &exact)?;
    }
    mean_correlation /= n_trials as f64;
    Ok(MetaGradReport {
        exact_grad: exact,
        mean_estimate,
        bias_norm,
        variance,
        mean_correlation,
        estimates,
        n_trials,
    })
}

/// Generates `n_mdps` independent random MDPs (uniform initial policy, zero
/// intrinsic reward), measures each, and pools the per-MDP statistics.
pub fn measure(
    variant: MetaVariant,
    mdp_params: &MdpParams,
    config: &InnerLoopConfig,
    assignment: &EstimatorAssignment,
    n_mdps: usize,
    n_trials: usize,
    seed: u64,
) -> Result<AggregateReport, MetaError> {
    let mut per_mdp = Vec::with_capacity(n_mdps);
    let mut mdp_seeds = Vec::with_capacity(n_mdps);
    let mut trial_seeds = Vec::with_capacity(n_mdps);
    for i in 0..n_mdps {
        let mdp_seed = derive2(seed, TAG_MDP, i as u64);
        let trial_seed = derive2(seed, TAG_TRIALS, i as u64);
        let problem = problem_for(variant, mdp_params.generate(mdp_seed)?)?;
        per_mdp.push(measure_problem(
            &problem,
            config,
            assignment,
            n_trials,
            trial_seed,
        )?);
        mdp_seeds.push(mdp_seed);
        trial_seeds.push(trial_seed);
    }
    let n = n_mdps as f64;
    let pooled_bias_norm = per_mdp.iter().map(|r| r.bias_norm).sum::<f64>() / n;
    let pooled_variance = per_mdp.iter().map(|r| r.variance).sum::<f64>() / n;
    let pooled_correlation = per_mdp.iter().map(|r| r.mean_correlation).sum::<f64>() / n;
    Ok(AggregateReport {
        per_mdp,
        mdp_seeds,
        trial_seeds,
        pooled_bias_norm,
        pooled_variance,
        pooled_correlation,
    })
}

/// Standard problem construction for the measurement sweeps: uniform initial
/// policy; zero intrinsic reward for LIRPG.
pub fn problem_for(variant: MetaVariant, mdp: TabularMdp) -> Result<MetaProblem, MetaError> {
    let theta0 = PolicyParams::zeros(mdp.n_states, mdp.n_actions);
    match variant {
        MetaVariant::Maml => MetaProblem::maml(mdp, theta0),
        MetaVariant::Lirpg => {
            let phi = Array2::zeros((mdp.n_states, mdp.n_actions));
            MetaProblem::lirpg(mdp, theta0, phi)
        }
    }
}

/// Monte-Carlo estimate of E ||theta_hat_K - theta_K||: the iterate path is
/// driven by the stochastic estimator `kind` with the given batch size, and
/// compared to the exact inner-loop endpoint.
pub fn measure_compositional_bias(
    problem: &MetaProblem,
    config: &InnerLoopConfig,
    kind: EstimatorKind,
    batch_size: usize,
    n_trials: usize,
    seed: u64,
) -> Result<f64, MetaError> {
    assert!(n_trials >= 1);
    let exact_end = exact_inner_loop(problem, config)?
        .pop()
        .expect("inner loop returns K+1 iterates")
        .flat();
    if kind == EstimatorKind::Exact {
        return Ok(0.0);
    }
    let mdp = &problem.mdp;
    let gamma = mdp.discount;
    let r_in = problem.inner_reward();
    let mut total = 0.0;
    for trial in 0..n_trials {
        let trial_seed = derive2(seed, TAG_TRIAL, trial as u64);
        let mut theta = problem.theta0.clone();
        for i in 0..config.k_steps {
            let batch = sample_trajectories(
                mdp,
                &theta,
                batch_size,
                derive2(trial_seed, TAG_COMP_BATCH, i as u64),
            );
            let baseline = baseline_for(
                kind,
                mdp,
                &theta,
                config.baseline_noise,
                derive2(trial_seed, TAG_COMP_BASE, i as u64),
            )?;
            let g = estimate_policy_gradient(
                kind,
                &batch,
                &theta,
                gamma,
                baseline.as_ref(),
                r_in.as_ref(),
            )?
            .value;
            theta = theta.add_flat(&g, config.learning_rate);
        }
        let diff = theta.flat() - &exact_end;
        total += diff.dot(&diff).sqrt();
    }
    Ok(total / n_trials as f64)
}
