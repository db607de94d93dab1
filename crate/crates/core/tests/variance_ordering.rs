//! Monte-Carlo check of the Hessian-estimator variance ordering
//! LVC < Loaded-DiCE < DiCE on a fixed 5-state MDP, with the orderings
//! separated by at least two standard errors of the variance estimates.

use metagrad_core::{
    estimate_hessian, generate_random_mdp, noisy_value_table, sample_trajectories, EstimatorKind,
    PolicyParams,
};
use ndarray::Array2;

struct VarStat {
    mean: f64,
    se: f64,
}

/// Frobenius variance E||H_b - mean(H)||^2 over `n_batches` batches, with
/// the standard error of that variance estimate.
fn hessian_variance(kind: EstimatorKind, n_batches: usize, batch_size: usize) -> VarStat {
    let mdp = generate_random_mdp(4242, 5, 2, 1.0, 10, 0.9).unwrap();
    let theta = PolicyParams::zeros(5, 2);
    let baseline = noisy_value_table(&mdp, &theta, 0.0, 0).unwrap();
    let d = mdp.param_dim();
    let mut estimates: Vec<Array2<f64>> = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let batch = sample_trajectories(&mdp, &theta, batch_size, 10_000 + b as u64);
        let h = estimate_hessian(kind, &batch, &theta, mdp.discount, Some(&baseline), None)
            .unwrap()
            .value;
        estimates.push(h);
    }
    let mut mean = Array2::<f64>::zeros((d, d));
    for h in &estimates {
        mean.scaled_add(1.0, h);
    }
    mean.mapv_inplace(|x| x / n_batches as f64);
    let sq_devs: Vec<f64> = estimates
        .iter()
        .map(|h| {
            let diff = h - &mean;
            diff.iter().map(|x| x * x).sum::<f64>()
        })
        .collect();
    let var = sq_devs.iter().sum::<f64>() / n_batches as f64;
    let second = sq_devs.iter().map(|x| (x - var) * (x - var)).sum::<f64>()
        / (n_batches as f64 - 1.0);
    VarStat {
        mean: var,
        se: (second / n_batches as f64).sqrt(),
    }
}

#[test]
fn lvc_below_loaded_dice_below_dice() {
    let n_batches = 10_000;
    let batch_size = 10;
    let lvc = hessian_variance(EstimatorKind::Lvc, n_batches, batch_size);
    let loaded = hessian_variance(EstimatorKind::LoadedDice, n_batches, batch_size);
    let dice = hessian_variance(EstimatorKind::Dice, n_batches, batch_size);
    println!(
        "variance: LVC {:.4e} (se {:.1e}) | Loaded {:.4e} (se {:.1e}) | DiCE {:.4e} (se {:.1e})",
        lvc.mean, lvc.se, loaded.mean, loaded.se, dice.mean, dice.se
    );
    assert!(
        lvc.mean + 2.0 * (lvc.se + loaded.se) < loaded.mean,
        "LVC {} not below Loaded {}",
        lvc.mean,
        loaded.mean
    );
    assert!(
        loaded.mean + 2.0 * (loaded.se + dice.se) < dice.mean,
        "Loaded {} not below DiCE {}",
        loaded.mean,
        dice.mean
    );
}
