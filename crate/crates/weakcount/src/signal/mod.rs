//! Recordings, weak labels, synthetic data with planted ground truth, and
//! dataset persistence.
//!
//! The data model is deliberately small. A [`TimeSeries`] is one recording of
//! a single accelerometer axis. A [`WeakLabel`] is the *only* supervision the
//! training path ever sees: how many events of each countable category the
//! recording contains. [`GroundTruth`] (exact onsets) exists only for
//! synthetic data and is used by tests and evaluation harnesses, never by
//! training.
//!
//! Category indexing convention used across the crate: category `0` is the
//! background ("non-shot") class, categories `1..N-1` are the countable event
//! classes. `WeakLabel::counts[i]` holds the count for category `i + 1`.

mod container;
mod synth;

pub use container::{load_dataset, save_dataset, DatasetError};
pub(crate) use synth::mix_seed;
pub use synth::{
    synthesize_series, ConfuserTemplate, PlanError, PlannedEvent, PlannedEventKind, SeriesPlan,
    ShotTemplate, SynthProfile,
};

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Index of the background category in every probability vector.
pub const NON_SHOT: usize = 0;

/// The combination of external-variable settings a recording was acquired
/// under. Recordings with equal keys belong to the same bin for the
/// learning/validation split.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct BinKey(pub BTreeMap<String, String>);

impl BinKey {
    pub fn new() -> Self {
        Self(BTreeMap::new())
    }

    pub fn with(mut self, key: &str, value: &str) -> Self {
        self.0.insert(key.to_string(), value.to_string());
        self
    }
}

impl fmt::Display for BinKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (k, v) in &self.0 {
            if !first {
                write!(f, ",")?;
            }
            write!(f, "{k}={v}")?;
            first = false;
        }
        Ok(())
    }
}

/// One recording of acceleration samples (in g) from a single axis.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub samples: Vec<f32>,
    pub sample_rate_hz: f64,
    pub series_id: String,
    pub bin_key: BinKey,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration of the recording in seconds.
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }
}

/// Per-category event counts for one recording — the only supervision.
///
/// `counts` has length `n_categories - 1`: the background class has no count
/// (the number of non-events is unknown in the field).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakLabel {
    pub counts: Vec<u32>,
    pub n_categories: usize,
}

impl WeakLabel {
    pub fn new(counts: Vec<u32>) -> Self {
        let n_categories = counts.len() + 1;
        Self {
            counts,
            n_categories,
        }
    }

    /// Total number of countable events across all categories.
    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }
}

/// Exact planted event onsets; synthetic data only. Never consumed by the
/// training path — it exists so instance-level behaviour can be verified.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth {
    /// (onset sample index, category index) pairs, sorted by onset.
    pub events: Vec<(usize, usize)>,
}

impl GroundTruth {
    /// Histogram over countable categories, comparable to `WeakLabel::counts`.
    pub fn category_counts(&self, n_categories: usize) -> Vec<u32> {
        let mut counts = vec![0u32; n_categories - 1];
        for &(_, cat) in &self.events {
            counts[cat - 1] += 1;
        }
        counts
    }
}

/// A labelled recording, optionally with planted ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub series: TimeSeries,
    pub label: WeakLabel,
    pub truth: Option<GroundTruth>,
}

/// A set of recordings sharing one category scheme.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub n_categories: usize,
    /// Length `n_categories`; index 0 names the background class.
    pub category_names: Vec<String>,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(category_names: Vec<String>) -> Self {
        Self {
            n_categories: category_names.len(),
            category_names,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Total countable events over all recordings.
    pub fn total_events(&self) -> u32 {
        self.records.iter().map(|r| r.label.total()).sum()
    }
}

/// Splits a dataset into learning and validation sets, bin by bin.
///
/// Within each bin, `ceil(fraction * bin_size)` recordings go to validation,
/// so every bin is represented and rounding favours the validation side.
/// Deterministic for a fixed seed.
pub fn split_dataset(
    dataset: Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), SplitError> {
    if dataset.records.is_empty() {
        return Err(SplitError::EmptyDataset);
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SplitError::BadFraction(fraction));
    }

    let mut bins: BTreeMap<BinKey, Vec<usize>> = BTreeMap::new();
    for (idx, rec) in dataset.records.iter().enumerate() {
        bins.entry(rec.series.bin_key.clone()).or_default().push(idx);
    }

    let mut validation_idx = Vec::new();
    for (bin_no, (_key, mut members)) in bins.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (bin_no as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        members.shuffle(&mut rng);
        let n_val = ((fraction * members.len() as f64).ceil() as usize).min(members.len());
        validation_idx.extend_from_slice(&members[..n_val]);
    }
    validation_idx.sort_unstable();

    let mut learning = Dataset::new(dataset.category_names.clone());
    let mut validation = Dataset::new(dataset.category_names.clone());
    let mut val_iter = validation_idx.iter().peekable();
    for (idx, rec) in dataset.records.into_iter().enumerate() {
        if val_iter.peek() == Some(&&idx) {
            val_iter.next();
            validation.records.push(rec);
        } else {
            learning.records.push(rec);
        }
    }
    Ok((learning, validation))
}

#[derive(Debug, thiserror::Error)]
pub enum SplitError {
    #[error("cannot split an empty dataset")]
    EmptyDataset,
    #[error("split fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
}
