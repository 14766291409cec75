//! Training from weak labels: proportion targets, the zero-adjusted
//! proportion loss, duplicate masking, adversarial regularization, Nesterov
//! SGD, and the three-phase pipeline.
//!
//! The unit of optimization is one recording ("bag"): run the classifier on
//! every candidate slice, average the predictions, and compare against the
//! proportions implied by the recording's event counts,
//!
//! ```text
//! p_i = c_i / |X|            (background = remainder, so Σp = 1)
//! L   = −Σ p_i · ln p̂_i  +  Σ p_i · ln p_i
//! ```
//!
//! The second term is constant in the parameters but turns the loss into
//! KL(p ‖ p̂): zero at perfect predictions, so values are comparable across
//! recordings and usable for early stopping.

mod mask;
mod phase;
mod pipeline;
mod sgd;
mod vat;

pub use mask::{mask_duplicates, predicted_counts, simple_post_filter, MaskedPredictions};
pub use phase::{train_phase, EpochStats, ForwardMode, PhaseResult};
pub use pipeline::{train_pipeline, PipelineInputs, PipelineOutcome, SeedOutcome};
pub use sgd::{sgd_step, SgdState};
pub use vat::{kl_divergence, kl_to_reference, vat_direction, vat_loss};

use serde::{Deserialize, Serialize};

use crate::preprocess::{extract_candidates, MetricConfig};
use crate::signal::{Dataset, WeakLabel};

/// Floor applied to predicted probabilities before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// Virtual adversarial training settings. The regularization weight and the
/// finite-difference step follow the original recipe (α = 1, ξ = 1e-6, one
/// power iteration); only the perturbation size is worth tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VatConfig {
    pub epsilon: f64,
    pub xi: f64,
    pub power_iterations: usize,
    pub alpha: f64,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self {
            epsilon: 5.0,
            xi: 1e-6,
            power_iterations: 1,
            alpha: 1.0,
        }
    }
}

/// The ablation switches. Each one enables a separately-measurable
/// improvement; the ladder in [`crate::eval`] turns them on cumulatively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    /// Pre-train on a wider dataset before the target dataset.
    pub pretrain: bool,
    /// Add the constant term that makes the loss a KL divergence.
    pub zero_loss: bool,
    /// Clip activations at 6 instead of plain ReLU.
    pub relu6: bool,
    /// Drop duplicate shot predictions inside the exclusion window at
    /// inference time.
    pub post_filter: bool,
    /// Apply the exclusion window during training and keep masked
    /// predictions out of backpropagation.
    pub learned_post_filter: bool,
    /// Virtual adversarial training.
    pub vat: bool,
}

impl Switches {
    pub fn all_on() -> Self {
        Self {
            pretrain: true,
            zero_loss: true,
            relu6: true,
            post_filter: true,
            learned_post_filter: true,
            vat: true,
        }
    }

    pub fn all_off() -> Self {
        Self {
            pretrain: false,
            zero_loss: false,
            relu6: false,
            post_filter: false,
            learned_post_filter: false,
            vat: false,
        }
    }
}

/// Everything the optimizer needs to know.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Nesterov momentum coefficient.
    pub momentum: f64,
    /// Halve the learning rate after this many epochs without improvement.
    pub halve_patience: usize,
    /// Stop the phase after this many epochs without improvement.
    pub stop_patience: usize,
    /// An epoch improves when validation loss drops by more than this.
    pub min_improvement: f64,
    /// Hard cap on epochs per phase.
    pub max_epochs: usize,
    /// Minimum event duration T_M in milliseconds: two shots closer than
    /// this are physically impossible, so later predictions inside the
    /// window are duplicates.
    pub min_event_duration_ms: f64,
    pub vat: VatConfig,
    /// Compute the adversarial term on every candidate, including masked
    /// ones (the masking question is independent of the regularizer).
    pub vat_on_masked: bool,
    pub switches: Switches,
    /// Number of random initializations trained per pipeline run.
    pub group_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            momentum: 0.9,
            halve_patience: 20,
            stop_patience: 40,
            min_improvement: 1e-5,
            max_epochs: 1000,
            min_event_duration_ms: 40.0,
            vat: VatConfig::default(),
            vat_on_masked: true,
            switches: Switches::all_on(),
            group_size: 20,
            seed: 0,
        }
    }
}

/// Proportion target for one recording: `p_i = c_i / |X|` for countable
/// categories, background as the remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct ProportionTarget {
    pub p: Vec<f64>,
}

/// Builds the proportion target from a weak label and the candidate count.
/// A recording whose counts exceed its candidates is unusable: the metric
/// missed events, so no proportion assignment can be consistent.
pub fn build_target(label: &WeakLabel, n_candidates: usize) -> Result<ProportionTarget, TrainError> {
    if n_candidates == 0 {
        return Err(TrainError::NoCandidates);
    }
    let total = label.total() as usize;
    if total > n_candidates {
        return Err(TrainError::UnusableRecording {
            counts: total,
            candidates: n_candidates,
        });
    }
    let n = label.n_categories;
    let mut p = vec![0.0; n];
    for (i, &c) in label.counts.iter().enumerate() {
        p[i + 1] = c as f64 / n_candidates as f64;
    }
    p[0] = 1.0 - p[1..].iter().sum::<f64>();
    Ok(ProportionTarget { p })
}

/// Mean of per-candidate probability vectors.
pub fn aggregate(preds: &[Vec<f64>]) -> Result<Vec<f64>, TrainError> {
    let first = preds.first().ok_or(TrainError::EmptyAggregate)?;
    let mut mean = vec![0.0; first.len()];
    for p in preds {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let inv = 1.0 / preds.len() as f64;
    for m in mean.iter_mut() {
        *m *= inv;
    }
    Ok(mean)
}

/// The proportion loss. With `zero_loss` it equals KL(p ‖ p̂); without, the
/// plain cross-entropy −Σ p ln p̂. Conventions: 0·ln 0 = 0 and p̂ is clamped
/// to [`LOG_CLAMP`] before the logarithm.
pub fn proportion_loss(p: &[f64], p_hat: &[f64], zero_loss: bool) -> f64 {
    let mut loss = 0.0;
    for (&pi, &qi) in p.iter().zip(p_hat) {
        if pi > 0.0 {
            loss -= pi * qi.max(LOG_CLAMP).ln();
            if zero_loss {
                loss += pi * pi.ln();
            }
        }
    }
    loss
}

/// Gradient of the proportion loss with respect to p̂ (the zero-loss term is
/// constant in p̂, so the flag does not appear).
pub fn proportion_loss_grad(p: &[f64], p_hat: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(p_hat)
        .map(|(&pi, &qi)| {
            if pi > 0.0 && qi > LOG_CLAMP {
                -pi / qi
            } else if pi > 0.0 {
                // Clamped region: the loss is locally constant in p̂.
                0.0
            } else {
                0.0
            }
        })
        .collect()
}

/// One recording, ready for optimization: candidate slices, their trigger
/// times, the proportion target, and the raw counts for error accounting.
#[derive(Debug, Clone)]
pub struct Bag {
    pub series_id: String,
    pub slices: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub target: Vec<f64>,
    pub counts: Vec<u32>,
}

/// Extracts candidates for every recording and builds proportion targets.
///
/// Recordings the metric cannot explain (more counted events than
/// candidates) are excluded and reported; recordings with zero candidates
/// and zero counts carry no signal and are silently dropped.
pub fn prepare_bags(dataset: &Dataset, metric: &MetricConfig) -> (Vec<Bag>, Vec<String>) {
    let mut bags = Vec::with_capacity(dataset.records.len());
    let mut warnings = Vec::new();
    for rec in &dataset.records {
        let candidates = extract_candidates(&rec.series, metric);
        if candidates.is_empty() {
            if rec.label.total() > 0 {
                warnings.push(format!(
                    "recording {}: {} events counted but no candidates triggered; excluded",
                    rec.series.series_id,
                    rec.label.total()
                ));
            }
            continue;
        }
        match build_target(&rec.label, candidates.len()) {
            Ok(target) => {
                let mut slices = Vec::with_capacity(candidates.len());
                let mut times = Vec::with_capacity(candidates.len());
                for c in candidates {
                    times.push(c.t_seconds);
                    slices.push(c.x);
                }
                bags.push(Bag {
                    series_id: rec.series.series_id.clone(),
                    slices,
                    times,
                    target: target.p,
                    counts: rec.label.counts.clone(),
                });
            }
            Err(TrainError::UnusableRecording { counts, candidates }) => {
                warnings.push(format!(
                    "recording {}: {counts} events counted but only {candidates} candidates; excluded",
                    rec.series.series_id
                ));
            }
            Err(e) => warnings.push(format!("recording {}: {e}", rec.series.series_id)),
        }
    }
    (bags, warnings)
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("cannot build a proportion target without candidates")]
    NoCandidates,
    #[error("recording counts {counts} events but only {candidates} candidates triggered")]
    UnusableRecording { counts: usize, candidates: usize },
    #[error("cannot aggregate an empty prediction list")]
    EmptyAggregate,
    #[error("candidate timestamps must be sorted ascending")]
    UnsortedTimestamps,
    #[error("no usable recordings in the learning set")]
    NoBags,
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Quant(#[from] crate::quant::QuantError),
}
