//! One training phase: epochs over recordings, plateau-halved learning rate,
//! early stopping, and best-checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::fq::QuantSim;
use crate::model::{backward_into, forward_trace, ForwardTrace, Gradients, ModelParameters};
use crate::quant::fake_quant_params;
use crate::signal::mix_seed;

use super::vat::vat_loss_sim;
use super::{
    aggregate, mask_duplicates, predicted_counts, proportion_loss, proportion_loss_grad, sgd_step,
    Bag, SgdState, TrainConfig, TrainError,
};

/// Whether the phase trains the plain network or the quantization
/// simulation (weights and activations passed through 8-bit codes, gradients
/// via the straight-through estimator).
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode<'a> {
    Float,
    FakeQuant(&'a QuantSim),
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_errors: u32,
    pub lr: f64,
}

/// Outcome of a phase: the checkpoint with the fewest validation counting
/// errors (ties broken by lowest validation loss) and the per-epoch history.
#[derive(Debug, Clone)]
pub struct PhaseResult {
    pub best: ModelParameters,
    pub best_val_errors: u32,
    pub best_val_loss: f64,
    pub history: Vec<EpochStats>,
}

struct BagEval {
    /// Scheduling loss: the cross-entropy part only. The zero-loss term is
    /// constant per recording, so improvements are identical with or without
    /// it — tracking the bare part keeps parameter trajectories bit-equal
    /// across that switch.
    sched_loss: f64,
    reported_loss: f64,
    errors: u32,
}

fn forward_probs(
    params: &ModelParameters,
    sim: Option<&QuantSim>,
    x: &[f64],
) -> Result<Vec<f64>, TrainError> {
    Ok(forward_trace(params, x, sim)?.probs)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn evaluate_bags(
    params: &ModelParameters,
    sim: Option<&QuantSim>,
    bags: &[Bag],
    cfg: &TrainConfig,
) -> Result<BagEval, TrainError> {
    let t_m = cfg.min_event_duration_ms / 1e3;
    let n_categories = params.config.n_categories;
    let mut sched = 0.0;
    let mut reported = 0.0;
    let mut errors = 0u32;
    for bag in bags {
        let mut preds = Vec::with_capacity(bag.slices.len());
        for x in &bag.slices {
            preds.push(forward_probs(params, sim, x)?);
        }
        let loss_preds = if cfg.switches.learned_post_filter {
            mask_duplicates(&preds, &bag.times, t_m)?.preds
        } else {
            preds.clone()
        };
        let p_hat = aggregate(&loss_preds)?;
        sched += proportion_loss(&bag.target, &p_hat, false);
        reported += proportion_loss(&bag.target, &p_hat, cfg.switches.zero_loss);

        let categories: Vec<usize> = preds.iter().map(|p| argmax(p)).collect();
        let estimated = predicted_counts(
            &categories,
            &bag.times,
            n_categories,
            t_m,
            cfg.switches.post_filter,
        );
        for (e, &c) in estimated.iter().zip(&bag.counts) {
            errors += e.abs_diff(c);
        }
    }
    let n = bags.len() as f64;
    Ok(BagEval {
        sched_loss: sched / n,
        reported_loss: reported / n,
        errors,
    })
}

/// Trains until the validation loss plateaus. Every epoch visits each
/// recording once (shuffled, one optimization step per recording). Returns
/// the best checkpoint over the whole phase, including the initial state.
pub fn train_phase(
    init: ModelParameters,
    learning: &[Bag],
    validation: &[Bag],
    cfg: &TrainConfig,
    mode: ForwardMode<'_>,
) -> Result<PhaseResult, TrainError> {
    if learning.is_empty() || validation.is_empty() {
        return Err(TrainError::NoBags);
    }
    let sim = match mode {
        ForwardMode::Float => None,
        ForwardMode::FakeQuant(s) => Some(s),
    };
    let t_m = cfg.min_event_duration_ms / 1e3;
    let mut params = init;
    let mut state = SgdState::new(params.data.len(), cfg.learning_rate, cfg.momentum);
    let mut grads = Gradients::zeros(&params);
    let mut vat_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7A7));

    let initial = evaluate_bags(&params, sim, validation, cfg)?;
    let mut best = params.clone();
    let mut best_errors = initial.errors;
    let mut best_loss = initial.sched_loss;
    let mut best_reported = initial.reported_loss;

    let mut best_sched = initial.sched_loss;
    let mut stale = 0usize;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..learning.len()).collect();

    for epoch in 0..cfg.max_epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut train_loss = 0.0;
        for &idx in &order {
            let bag = &learning[idx];
            let n_cand = bag.slices.len();

            // In fake-quant mode the step runs on quantize-dequantized
            // weights; gradients flow back to the float master weights
            // through the straight-through mask.
            let (eff, wmask) = match sim {
                None => (None, None),
                Some(_) => {
                    let (fq, mask) = fake_quant_params(&params)?;
                    (Some(fq), Some(mask))
                }
            };
            let step_params: &ModelParameters = eff.as_ref().unwrap_or(&params);

            let mut traces: Vec<ForwardTrace> = Vec::with_capacity(n_cand);
            for x in &bag.slices {
                traces.push(forward_trace(step_params, x, sim)?);
            }
            let preds: Vec<Vec<f64>> = traces.iter().map(|t| t.probs.clone()).collect();

            let (loss_preds, mask) = if cfg.switches.learned_post_filter {
                let m = mask_duplicates(&preds, &bag.times, t_m)?;
                (m.preds, m.mask)
            } else {
                (preds, vec![true; n_cand])
            };
            let p_hat = aggregate(&loss_preds)?;
            let mut loss = proportion_loss(&bag.target, &p_hat, cfg.switches.zero_loss);

            grads.clear();
            let d_phat = proportion_loss_grad(&bag.target, &p_hat);
            let d_probs: Vec<f64> = d_phat.iter().map(|g| g / n_cand as f64).collect();
            for (j, trace) in traces.iter().enumerate() {
                if mask[j] {
                    backward_into(step_params, trace, &d_probs, &mut grads);
                }
            }

            if cfg.switches.vat {
                let vat_candidates: Vec<usize> = (0..n_cand)
                    .filter(|&j| cfg.vat_on_masked || mask[j])
                    .collect();
                if !vat_candidates.is_empty() {
                    let scale = 1.0 / vat_candidates.len() as f64;
                    let mut vat_total = 0.0;
                    for &j in &vat_candidates {
                        let (kl, vg) =
                            vat_loss_sim(step_params, &bag.slices[j], &cfg.vat, sim, &mut vat_rng)?;
                        vat_total += kl;
                        for (g, &v) in grads.data.iter_mut().zip(&vg.data) {
                            *g += scale * v;
                        }
                    }
                    loss += vat_total * scale;
                }
            }

            if let Some(wmask) = &wmask {
                for (g, &keep) in grads.data.iter_mut().zip(wmask) {
                    if !keep {
                        *g = 0.0;
                    }
                }
            }
            sgd_step(&mut params, &grads.data, &mut state);
            train_loss += loss;
        }
        train_loss /= learning.len() as f64;

        let eval = evaluate_bags(&params, sim, validation, cfg)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss: eval.reported_loss,
            val_errors: eval.errors,
            lr: state.lr,
        });

        if eval.errors < best_errors || (eval.errors == best_errors && eval.sched_loss < best_loss)
        {
            best = params.clone();
            best_errors = eval.errors;
            best_loss = eval.sched_loss;
            best_reported = eval.reported_loss;
        }

        if eval.sched_loss < best_sched - cfg.min_improvement {
            best_sched = eval.sched_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.stop_patience {
                break;
            }
            if stale % cfg.halve_patience == 0 {
                state.lr /= 2.0;
            }
        }
    }

    Ok(PhaseResult {
        best,
        best_val_errors: best_errors,
        best_val_loss: best_reported,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ConvSpec, NetworkConfig};
    use crate::train::Switches;

    fn tiny_net(clip: Option<f64>) -> NetworkConfig {
        NetworkConfig {
            input_len: 16,
            conv: vec![ConvSpec { kernel: 5, channels: 3, pool: 2 }],
            hidden_units: 6,
            n_categories: 2,
            activation_clip: clip,
        }
    }

    fn noise_bags(n: usize, seed: u64) -> Vec<Bag> {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let n_cand = rng.random_range(3..8);
                let slices = (0..n_cand)
                    .map(|_| (0..16).map(|_| rng.random_range(-0.5..0.5)).collect())
                    .collect();
                let times = (0..n_cand).map(|k| k as f64 * 0.1).collect();
                Bag {
                    series_id: format!("b{i}"),
                    slices,
                    times,
                    target: vec![1.0, 0.0],
                    counts: vec![0],
                }
            })
            .collect()
    }

    fn fast_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.1,
            max_epochs: 30,
            halve_patience: 5,
            stop_patience: 10,
            switches: Switches {
                pretrain: false,
                zero_loss: true,
                relu6: true,
                post_filter: true,
                learned_post_filter: true,
                vat: false,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn constant_background_target_converges_to_near_zero_loss() {
        let net = tiny_net(Some(6.0));
        let params = init_params(&net, 3).unwrap();
        let learning = noise_bags(12, 5);
        let validation = noise_bags(3, 6);
        let result =
            train_phase(params, &learning, &validation, &fast_cfg(), ForwardMode::Float).unwrap();
        assert_eq!(result.best_val_errors, 0);
        assert!(
            result.best_val_loss < 0.05,
            "loss should approach zero, got {}",
            result.best_val_loss
        );
    }

    #[test]
    fn zero_loss_switch_does_not_change_the_trajectory() {
        let net = tiny_net(Some(6.0));
        let learning = noise_bags(8, 7);
        let validation = noise_bags(2, 8);
        let mut with = fast_cfg();
        with.switches.zero_loss = true;
        let mut without = fast_cfg();
        without.switches.zero_loss = false;

        let a = train_phase(
            init_params(&net, 1).unwrap(),
            &learning,
            &validation,
            &with,
            ForwardMode::Float,
        )
        .unwrap();
        let b = train_phase(
            init_params(&net, 1).unwrap(),
            &learning,
            &validation,
            &without,
            ForwardMode::Float,
        )
        .unwrap();
        assert_eq!(a.best.data, b.best.data, "parameter trajectories must be bit-identical");
        assert_eq!(a.history.len(), b.history.len());
        for (ha, hb) in a.history.iter().zip(&b.history) {
            assert_eq!(ha.val_errors, hb.val_errors);
            assert_eq!(ha.lr, hb.lr);
        }
    }

    #[test]
    fn training_is_reproducible_for_a_fixed_seed() {
        let net = tiny_net(Some(6.0));
        let learning = noise_bags(6, 9);
        let validation = noise_bags(2, 10);
        let mut cfg = fast_cfg();
        cfg.switches.vat = true;
        cfg.vat.epsilon = 0.5;
        cfg.max_epochs = 5;
        let a = train_phase(
            init_params(&net, 2).unwrap(),
            &learning,
            &validation,
            &cfg,
            ForwardMode::Float,
        )
        .unwrap();
        let b = train_phase(
            init_params(&net, 2).unwrap(),
            &learning,
            &validation,
            &cfg,
            ForwardMode::Float,
        )
        .unwrap();
        assert_eq!(a.best.data, b.best.data);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let net = tiny_net(None);
        let params = init_params(&net, 0).unwrap();
        let bags = noise_bags(2, 0);
        assert!(matches!(
            train_phase(params.clone(), &[], &bags, &fast_cfg(), ForwardMode::Float),
            Err(TrainError::NoBags)
        ));
        assert!(matches!(
            train_phase(params, &bags, &[], &fast_cfg(), ForwardMode::Float),
            Err(TrainError::NoBags)
        ));
    }
}
