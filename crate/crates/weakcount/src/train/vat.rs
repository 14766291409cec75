//! Virtual adversarial training.
//!
//! The regularizer asks: how much can the output distribution change under
//! the worst small input perturbation? The worst direction is found by power
//! iteration on the KL divergence's curvature (one iteration suffices in
//! practice), and the penalty is the KL divergence between the clean output,
//! treated as a constant, and the output at the adversarial point. There is
//! no ramp-up: the term applies from the first epoch.
//!
//! Every entry point takes an optional quantization simulation so the
//! regularizer stays consistent during quantization-aware training.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::fq::QuantSim;
use crate::model::{backward, forward_trace, Gradients, ModelParameters};

use super::{TrainError, VatConfig, LOG_CLAMP};

/// KL(p ‖ q) with 0·ln0 = 0 and q clamped away from zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            kl += pi * (pi.max(LOG_CLAMP).ln() - qi.max(LOG_CLAMP).ln());
        }
    }
    kl
}

fn kl_grad_wrt_q(p: &[f64], q: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi > 0.0 && qi > LOG_CLAMP {
                -pi / qi
            } else {
                0.0
            }
        })
        .collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// KL(p_ref ‖ f(x)) and its parameter gradients, with `p_ref` held constant.
/// This is the piece of the adversarial loss that backpropagates.
pub fn kl_to_reference(
    params: &ModelParameters,
    x: &[f64],
    p_ref: &[f64],
) -> Result<(f64, Gradients), TrainError> {
    kl_to_reference_sim(params, x, p_ref, None)
}

pub(super) fn kl_to_reference_sim(
    params: &ModelParameters,
    x: &[f64],
    p_ref: &[f64],
    sim: Option<&QuantSim>,
) -> Result<(f64, Gradients), TrainError> {
    let trace = forward_trace(params, x, sim)?;
    let loss = kl_divergence(p_ref, &trace.probs);
    let dprobs = kl_grad_wrt_q(p_ref, &trace.probs);
    Ok((loss, backward(params, &trace, &dprobs)))
}

/// The adversarial direction: a random unit vector refined by `k` power
/// iterations of the input-gradient of KL(f(x) ‖ f(x + ξd)).
pub fn vat_direction(
    params: &ModelParameters,
    x: &[f64],
    p_clean: &[f64],
    xi: f64,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, TrainError> {
    vat_direction_sim(params, x, p_clean, xi, k, None, rng)
}

fn vat_direction_sim(
    params: &ModelParameters,
    x: &[f64],
    p_clean: &[f64],
    xi: f64,
    k: usize,
    sim: Option<&QuantSim>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, TrainError> {
    let mut d: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut d);
    for _ in 0..k {
        let x_pert: Vec<f64> = x.iter().zip(&d).map(|(&a, &b)| a + xi * b).collect();
        let trace = forward_trace(params, &x_pert, sim)?;
        let dprobs = kl_grad_wrt_q(p_clean, &trace.probs);
        let g = backward(params, &trace, &dprobs);
        d = g.input;
        if normalize(&mut d) == 0.0 {
            // Flat output around x (e.g. a constant network): any direction
            // gives zero loss, so stop refining.
            break;
        }
    }
    Ok(d)
}

/// The adversarial loss `α · KL(f(x) ‖ f(x + ε·d))` and its parameter
/// gradient. The clean prediction and the direction are treated as
/// constants; only the perturbed forward pass backpropagates.
pub fn vat_loss(
    params: &ModelParameters,
    x: &[f64],
    cfg: &VatConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients), TrainError> {
    vat_loss_sim(params, x, cfg, None, rng)
}

pub(super) fn vat_loss_sim(
    params: &ModelParameters,
    x: &[f64],
    cfg: &VatConfig,
    sim: Option<&QuantSim>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients), TrainError> {
    if cfg.epsilon == 0.0 {
        return Ok((0.0, Gradients::zeros(params)));
    }
    let p_clean = forward_trace(params, x, sim)?.probs;
    let d = vat_direction_sim(params, x, &p_clean, cfg.xi, cfg.power_iterations, sim, rng)?;
    let x_adv: Vec<f64> = x.iter().zip(&d).map(|(&a, &b)| a + cfg.epsilon * b).collect();
    let (kl, mut grads) = kl_to_reference_sim(params, &x_adv, &p_clean, sim)?;
    if cfg.alpha != 1.0 {
        for g in grads.data.iter_mut() {
            *g *= cfg.alpha;
        }
        for g in grads.input.iter_mut() {
            *g *= cfg.alpha;
        }
    }
    Ok((cfg.alpha * kl, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params, ConvSpec, NetworkConfig};
    use rand::SeedableRng;

    fn cfg() -> NetworkConfig {
        NetworkConfig {
            input_len: 20,
            conv: vec![ConvSpec { kernel: 5, channels: 3, pool: 2 }],
            hidden_units: 6,
            n_categories: 2,
            activation_clip: Some(6.0),
        }
    }

    fn input(seed: u64, len: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_epsilon_gives_zero_loss() {
        let params = init_params(&cfg(), 1).unwrap();
        let x = input(2, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vat = VatConfig { epsilon: 0.0, ..VatConfig::default() };
        let (loss, grads) = vat_loss(&params, &x, &vat, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn constant_network_has_zero_adversarial_loss() {
        let mut params = init_params(&cfg(), 1).unwrap();
        params.data.iter_mut().for_each(|v| *v = 0.0);
        let x = input(4, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vat = VatConfig { epsilon: 2.5, ..VatConfig::default() };
        let (loss, grads) = vat_loss(&params, &x, &vat, &mut rng).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grads.data.iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_at_equality() {
        let p = vec![0.3, 0.7];
        assert!(kl_divergence(&p, &p).abs() < 1e-12);
        assert!(kl_divergence(&p, &[0.5, 0.5]) > 0.0);
    }

    /// Finite differences on the backpropagated piece with the direction and
    /// the reference prediction frozen.
    #[test]
    fn adversarial_gradient_matches_finite_differences() {
        let net = cfg();
        let params = init_params(&net, 7).unwrap();
        let x = input(8, net.input_len);
        let mut rng = ChaCha8Rng::seed_from_u64(9);

        let p_clean = forward(&params, &x).unwrap();
        let d = vat_direction(&params, &x, &p_clean, 1e-6, 1, &mut rng).unwrap();
        let eps_adv = 1.5;
        let x_adv: Vec<f64> = x.iter().zip(&d).map(|(&a, &b)| a + eps_adv * b).collect();

        let (_, analytic) = kl_to_reference(&params, &x_adv, &p_clean).unwrap();

        let eps = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..params.data.len() {
            let mut plus = params.clone();
            plus.data[i] += eps;
            let mut minus = params.clone();
            minus.data[i] -= eps;
            let lp = kl_divergence(&p_clean, &forward(&plus, &x_adv).unwrap());
            let lm = kl_divergence(&p_clean, &forward(&minus, &x_adv).unwrap());
            let fd = (lp - lm) / (2.0 * eps);
            let a = analytic.data[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((a - fd).abs() / denom);
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }
}
