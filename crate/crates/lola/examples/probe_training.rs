use metagrad_lola::*;
use metagrad_core::rng::derive2;
use ndarray::Array1;

// Diagnostic: track off-policy vs on-policy inner-gradient error against the
// exact gradient during a training run, plus cumulative ratio stats.
fn main() {
    let mut config = LolaConfig::defaults(LolaAssignment::on_policy());
    config.inner_batch = 128;
    let mut state = LolaState::new(&config);
    let gamma = config.game.discount;
    let mut err_on_sum = 0.0;
    let mut err_off_sum = 0.0;
    for u in 0..120 {
        // fresh data + buffer maintained by the on-policy run
        let fresh = rollout(&config.game, &state.policy_1, &state.policy_2, 128, derive2(7777, 1, u));
        let exact = value_derivs_sum(&config.game, &state.policy_1, &state.policy_2, 2);
        let on = dice_grads(&fresh, &state.policy_1, &state.policy_2, &state.values, gamma).unwrap();
        let err_on = (&on.grad[1][1] - &exact.grad_2).dot(&(&on.grad[1][1] - &exact.grad_2)).sqrt();
        let gnorm = exact.grad_2.dot(&exact.grad_2).sqrt();
        if !state.buffer.is_empty() {
            let sample = state.buffer.sample(128, derive2(7777, 2, u)).unwrap();
            let off = off_policy_dice_grads(&sample, &state.policy_1, &state.policy_2, &state.values, gamma).unwrap();
            let err_off = (&off.grad[1][1] - &exact.grad_2).dot(&(&off.grad[1][1] - &exact.grad_2)).sqrt();
            // ratio stats on this sample
            let mut wmax: f64 = 0.0; let mut wend_mean = 0.0;
            for r in &sample {
                let mut w = 1.0f64;
                for t in 0..r.len() {
                    let s1 = r.states[t]; let s2 = partner_state(s1);
                    let lr = (state.policy_1.log_prob(s1, r.actions_1[t] as usize) - r.logp_1[t])
                           + (state.policy_2.log_prob(s2, r.actions_2[t] as usize) - r.logp_2[t]);
                    w *= lr.exp();
                    wmax = wmax.max(w);
                }
                wend_mean += w;
            }
            wend_mean /= sample.len() as f64;
            if u % 20 == 0 {
                println!("u={u}: |g|={gnorm:.3} err_on={err_on:.3} err_off={err_off:.3} wmax={wmax:.2e} wend_mean={wend_mean:.3}");
            }
            err_on_sum += err_on; err_off_sum += err_off;
        }
        lola_step(&mut state, &config, 7777).unwrap();
    }
    println!("cumulative err: on {:.2} off {:.2}", err_on_sum, err_off_sum);
    let _ = Array1::<f64>::zeros(1);
}
