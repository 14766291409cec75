//! Duplicate-prediction handling around the minimum cycle time.
//!
//! Two shots cannot be closer than the weapon's minimum cycle time, so when
//! several candidates inside one window predict a shot, all but the first
//! are duplicates. At inference time [`simple_post_filter`] just drops them.
//! During training [`mask_duplicates`] replaces them with a maximally-certain
//! background prediction *and* flags them for exclusion from
//! backpropagation, so the network is never penalized for confidently
//! predicting a shot on a slightly-offset slice of the same event.
//!
//! Masking is iterative: a prediction that has itself been masked does not
//! open an exclusion window.

use crate::signal::NON_SHOT;

use super::TrainError;

/// Output of [`mask_duplicates`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPredictions {
    /// Per-candidate vectors; masked entries are the substitute background
    /// one-hot.
    pub preds: Vec<Vec<f64>>,
    /// `true` where the raw prediction survived. Masked candidates must not
    /// contribute gradients.
    pub mask: Vec<bool>,
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

/// Applies the exclusion window to training predictions.
///
/// Candidates are visited in time order. When an unmasked candidate predicts
/// a shot at time `t`, every later candidate with timestamp in `(t, t + t_m]`
/// is masked; masked candidates never open windows themselves. Masked
/// entries are replaced by the background one-hot `e`.
pub fn mask_duplicates(
    preds: &[Vec<f64>],
    times: &[f64],
    t_m: f64,
) -> Result<MaskedPredictions, TrainError> {
    assert_eq!(preds.len(), times.len(), "one timestamp per prediction");
    if times.windows(2).any(|w| w[0] > w[1]) {
        return Err(TrainError::UnsortedTimestamps);
    }
    let n = preds.len();
    let mut mask = vec![true; n];
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        if argmax(&preds[i]) == NON_SHOT {
            continue;
        }
        for j in (i + 1)..n {
            if times[j] > times[i] + t_m {
                break;
            }
            if times[j] > times[i] {
                mask[j] = false;
            }
        }
    }
    let out = preds
        .iter()
        .zip(&mask)
        .map(|(p, &keep)| {
            if keep {
                p.clone()
            } else {
                let mut e = vec![0.0; p.len()];
                e[NON_SHOT] = 1.0;
                e
            }
        })
        .collect();
    Ok(MaskedPredictions { preds: out, mask })
}

/// Inference-time counterpart of the same window: keep a shot, drop
/// subsequent shots within `(t, t + t_m]`, and let kept shots re-open the
/// window. Input and output are `(timestamp, category)` pairs of shot
/// predictions in time order.
pub fn simple_post_filter(shots: &[(f64, usize)], t_m: f64) -> Vec<(f64, usize)> {
    let mut kept: Vec<(f64, usize)> = Vec::new();
    for &(t, cat) in shots {
        match kept.last() {
            Some(&(last, _)) if t > last && t <= last + t_m => {}
            _ => kept.push((t, cat)),
        }
    }
    kept
}

/// Per-category estimated counts from per-candidate argmax predictions.
/// With `post_filter` the exclusion window is applied first; the returned
/// vector has one entry per countable category.
pub fn predicted_counts(
    categories: &[usize],
    times: &[f64],
    n_categories: usize,
    t_m: f64,
    post_filter: bool,
) -> Vec<u32> {
    let shots: Vec<(f64, usize)> = times
        .iter()
        .zip(categories)
        .filter(|(_, &c)| c != NON_SHOT)
        .map(|(&t, &c)| (t, c))
        .collect();
    let kept = if post_filter {
        simple_post_filter(&shots, t_m)
    } else {
        shots
    };
    let mut counts = vec![0u32; n_categories - 1];
    for (_, cat) in kept {
        counts[cat - 1] += 1;
    }
    counts
}
