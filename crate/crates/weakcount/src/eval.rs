//! Counting error rates, trivial baselines, and the ablation ladder.
//!
//! The headline metric is the counting error rate
//!
//! ```text
//! E = Σ_{i,j} |ĉ_ij − c_ij|  /  Σ_{i,j} c_ij
//! ```
//!
//! summed over countable categories `i` and recordings `j`. Recordings with
//! no true events never enter `E`; their spurious detections are reported
//! separately as raw false positives, because folding them into a ratio
//! would need a denominator that does not exist.

use rayon::prelude::*;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{init_params, NetworkConfig};
use crate::preprocess::{extract_candidates, MetricConfig};
use crate::signal::{mix_seed, Dataset};
use crate::train::{
    predicted_counts, train_phase, Bag, ForwardMode, Switches, TrainConfig, TrainError,
};

/// Estimated vs true counts for one recording.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeriesCounts {
    pub series_id: String,
    /// Per countable category.
    pub estimated: Vec<u32>,
    pub truth: Vec<u32>,
}

impl SeriesCounts {
    fn true_total(&self) -> u32 {
        self.truth.iter().sum()
    }
}

/// Per-recording counting results for a whole dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountReport {
    pub n_categories: usize,
    pub rows: Vec<SeriesCounts>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("error rate is undefined: no recording has a true event count > 0")]
    ZeroTrueTotal,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CountReport {
    /// The counting error rate over recordings that contain true events.
    pub fn error_rate(&self) -> Result<f64, EvalError> {
        let mut num = 0u64;
        let mut den = 0u64;
        for row in self.rows.iter().filter(|r| r.true_total() > 0) {
            for (&e, &t) in row.estimated.iter().zip(&row.truth) {
                num += e.abs_diff(t) as u64;
                den += t as u64;
            }
        }
        if den == 0 {
            return Err(EvalError::ZeroTrueTotal);
        }
        Ok(num as f64 / den as f64)
    }

    /// Alternative normalization by the candidate total rather than the true
    /// event total; smaller numbers, identical ordering for a fixed dataset.
    pub fn error_rate_per_candidate(&self, total_candidates: u64) -> Result<f64, EvalError> {
        if total_candidates == 0 {
            return Err(EvalError::ZeroTrueTotal);
        }
        let mut num = 0u64;
        for row in self.rows.iter().filter(|r| r.true_total() > 0) {
            for (&e, &t) in row.estimated.iter().zip(&row.truth) {
                num += e.abs_diff(t) as u64;
            }
        }
        Ok(num as f64 / total_candidates as f64)
    }

    /// Error rate restricted to one countable category (1-based).
    pub fn error_rate_for(&self, category: usize) -> Option<f64> {
        let i = category - 1;
        let mut num = 0u64;
        let mut den = 0u64;
        for row in self.rows.iter().filter(|r| r.true_total() > 0) {
            num += row.estimated[i].abs_diff(row.truth[i]) as u64;
            den += row.truth[i] as u64;
        }
        (den > 0).then(|| num as f64 / den as f64)
    }

    /// Spurious detections on recordings with no true events.
    pub fn false_positives(&self) -> u32 {
        self.rows
            .iter()
            .filter(|r| r.true_total() == 0)
            .map(|r| r.estimated.iter().sum::<u32>())
            .sum()
    }

    /// Number of recordings with no true events (the false-positive base).
    pub fn non_shot_recordings(&self) -> usize {
        self.rows.iter().filter(|r| r.true_total() == 0).count()
    }

    /// (estimated total, true total) per countable category — the raw count
    /// an armourer would read off.
    pub fn reported_totals(&self) -> Vec<(u64, u64)> {
        let mut totals = vec![(0u64, 0u64); self.n_categories - 1];
        for row in &self.rows {
            for (i, (&e, &t)) in row.estimated.iter().zip(&row.truth).enumerate() {
                totals[i].0 += e as u64;
                totals[i].1 += t as u64;
            }
        }
        totals
    }
}

/// Counts a whole dataset with an arbitrary per-slice predictor (float
/// model, fake-quant simulation, or the integer path).
pub fn count_dataset<F>(
    dataset: &Dataset,
    metric: &MetricConfig,
    min_event_duration_ms: f64,
    post_filter: bool,
    mut predict: F,
) -> CountReport
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let t_m = min_event_duration_ms / 1e3;
    let mut rows = Vec::with_capacity(dataset.records.len());
    for rec in &dataset.records {
        let candidates = extract_candidates(&rec.series, metric);
        let mut categories = Vec::with_capacity(candidates.len());
        let mut times = Vec::with_capacity(candidates.len());
        for c in &candidates {
            let probs = predict(&c.x);
            categories.push(crate::quant::argmax(&probs));
            times.push(c.t_seconds);
        }
        let estimated =
            predicted_counts(&categories, &times, dataset.n_categories, t_m, post_filter);
        rows.push(SeriesCounts {
            series_id: rec.series.series_id.clone(),
            estimated,
            truth: rec.label.counts.clone(),
        });
    }
    CountReport {
        n_categories: dataset.n_categories,
        rows,
    }
}

/// The model that never predicts an event: by construction `E = 100%` on any
/// dataset with at least one true event.
pub fn baseline_always_non_shot(dataset: &Dataset) -> CountReport {
    let rows = dataset
        .records
        .iter()
        .map(|rec| SeriesCounts {
            series_id: rec.series.series_id.clone(),
            estimated: vec![0; dataset.n_categories - 1],
            truth: rec.label.counts.clone(),
        })
        .collect();
    CountReport {
        n_categories: dataset.n_categories,
        rows,
    }
}

/// The model that calls every candidate a shot (of the first countable
/// category): its error rate measures the candidate/event imbalance.
pub fn baseline_always_shot(dataset: &Dataset, metric: &MetricConfig) -> CountReport {
    let rows = dataset
        .records
        .iter()
        .map(|rec| {
            let n_cand = extract_candidates(&rec.series, metric).len() as u32;
            let mut estimated = vec![0; dataset.n_categories - 1];
            estimated[0] = n_cand;
            SeriesCounts {
                series_id: rec.series.series_id.clone(),
                estimated,
                truth: rec.label.counts.clone(),
            }
        })
        .collect();
    CountReport {
        n_categories: dataset.n_categories,
        rows,
    }
}

/// Labels each candidate randomly with the learning set's per-category
/// candidate frequencies, the most trivial exploitation of the weak labels.
/// Returns one error rate per repetition.
pub fn baseline_weighted_random(
    learning: &Dataset,
    eval: &Dataset,
    metric: &MetricConfig,
    seed: u64,
    repetitions: usize,
) -> Result<Vec<f64>, EvalError> {
    let mut total_candidates = 0u64;
    let mut totals = vec![0u64; learning.n_categories - 1];
    for rec in &learning.records {
        total_candidates += extract_candidates(&rec.series, metric).len() as u64;
        for (t, &c) in totals.iter_mut().zip(&rec.label.counts) {
            *t += c as u64;
        }
    }
    let freq: Vec<f64> = totals
        .iter()
        .map(|&t| {
            if total_candidates == 0 {
                0.0
            } else {
                t as f64 / total_candidates as f64
            }
        })
        .collect();

    // Candidate counts per eval recording are fixed; only labels are random.
    let eval_counts: Vec<(String, usize, Vec<u32>)> = eval
        .records
        .iter()
        .map(|rec| {
            (
                rec.series.series_id.clone(),
                extract_candidates(&rec.series, metric).len(),
                rec.label.counts.clone(),
            )
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rates = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let rows: Vec<SeriesCounts> = eval_counts
            .iter()
            .map(|(id, n_cand, truth)| {
                let mut estimated = vec![0u32; eval.n_categories - 1];
                for _ in 0..*n_cand {
                    let r: f64 = rng.random_range(0.0..1.0);
                    let mut acc = 0.0;
                    for (i, &f) in freq.iter().enumerate() {
                        acc += f;
                        if r < acc {
                            estimated[i] += 1;
                            break;
                        }
                    }
                }
                SeriesCounts {
                    series_id: id.clone(),
                    estimated,
                    truth: truth.clone(),
                }
            })
            .collect();
        let report = CountReport {
            n_categories: eval.n_categories,
            rows,
        };
        rates.push(report.error_rate()?);
    }
    Ok(rates)
}

/// One rung of the improvement ladder.
#[derive(Debug, Clone)]
pub struct RungSpec {
    pub name: &'static str,
    pub switches: Switches,
}

/// The rungs in presentation order; each keeps every previous switch on.
pub fn ablation_rungs() -> Vec<RungSpec> {
    let mut s = Switches::all_off();
    let mut rungs = vec![RungSpec { name: "base", switches: s }];
    s.pretrain = true;
    rungs.push(RungSpec { name: "+pretrain", switches: s });
    s.zero_loss = true;
    rungs.push(RungSpec { name: "+zero_loss", switches: s });
    s.relu6 = true;
    rungs.push(RungSpec { name: "+relu6", switches: s });
    s.post_filter = true;
    rungs.push(RungSpec { name: "+post_filter", switches: s });
    s.learned_post_filter = true;
    rungs.push(RungSpec { name: "+learned_post_filter", switches: s });
    s.vat = true;
    rungs.push(RungSpec { name: "+vat", switches: s });
    rungs
}

/// Error-rate distribution of one rung over the seed group.
#[derive(Debug, Clone)]
pub struct RungResult {
    pub name: String,
    /// One validation error rate per seed; non-converged runs recorded as 1.0.
    pub errors: Vec<f64>,
}

impl RungResult {
    pub fn median(&self) -> f64 {
        quantile(&self.errors, 0.5)
    }

    pub fn quantiles(&self) -> [f64; 5] {
        [
            quantile(&self.errors, 0.0),
            quantile(&self.errors, 0.25),
            quantile(&self.errors, 0.5),
            quantile(&self.errors, 0.75),
            quantile(&self.errors, 1.0),
        ]
    }
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rungs: Vec<RungResult>,
    pub seeds: usize,
}

/// Datasets for the ladder, already extracted into bags.
#[derive(Debug, Clone, Copy)]
pub struct AblationInputs<'a> {
    pub learning: &'a [Bag],
    pub validation: &'a [Bag],
    pub pretrain_learning: &'a [Bag],
    pub pretrain_validation: &'a [Bag],
    pub network: &'a NetworkConfig,
}

/// Runs every rung with the same `seeds` random initializations and reports
/// the distribution of float-model validation error rates. Error rates are
/// capped at 100%: a model that diverged counts as a total failure either
/// way.
pub fn ablation_report(
    inputs: &AblationInputs<'_>,
    base_cfg: &TrainConfig,
    seeds: usize,
) -> Result<AblationReport, TrainError> {
    let val_true_total: u64 = inputs
        .validation
        .iter()
        .map(|b| b.counts.iter().map(|&c| c as u64).sum::<u64>())
        .sum();
    assert!(val_true_total > 0, "validation set needs true events");

    let mut rungs = Vec::new();
    for rung in ablation_rungs() {
        let errors: Vec<f64> = (0..seeds as u64)
            .into_par_iter()
            .map(|i| {
                let seed = mix_seed(base_cfg.seed, i);
                rung_error(inputs, base_cfg, &rung.switches, seed, val_true_total)
            })
            .collect::<Result<_, _>>()?;
        rungs.push(RungResult {
            name: rung.name.to_string(),
            errors,
        });
    }
    Ok(AblationReport { rungs, seeds })
}

fn rung_error(
    inputs: &AblationInputs<'_>,
    base_cfg: &TrainConfig,
    switches: &Switches,
    seed: u64,
    val_true_total: u64,
) -> Result<f64, TrainError> {
    let mut cfg = base_cfg.clone();
    cfg.switches = *switches;
    cfg.seed = seed;
    let mut net = inputs.network.clone();
    if !switches.relu6 {
        net.activation_clip = None;
    }
    let mut params = init_params(&net, seed)?;
    if switches.pretrain {
        let phase = train_phase(
            params,
            inputs.pretrain_learning,
            inputs.pretrain_validation,
            &cfg,
            ForwardMode::Float,
        )?;
        params = phase.best;
    }
    let phase = train_phase(
        params,
        inputs.learning,
        inputs.validation,
        &cfg,
        ForwardMode::Float,
    )?;

    // Error rate over validation recordings that contain true events.
    let t_m = cfg.min_event_duration_ms / 1e3;
    let mut num = 0u64;
    for bag in inputs.validation {
        if bag.counts.iter().all(|&c| c == 0) {
            continue;
        }
        let mut categories = Vec::with_capacity(bag.slices.len());
        for x in &bag.slices {
            let probs = crate::model::forward(&phase.best, x)?;
            categories.push(crate::quant::argmax(&probs));
        }
        let estimated = predicted_counts(
            &categories,
            &bag.times,
            net.n_categories,
            t_m,
            switches.post_filter,
        );
        for (&e, &c) in estimated.iter().zip(&bag.counts) {
            num += e.abs_diff(c) as u64;
        }
    }
    Ok((num as f64 / val_true_total as f64).min(1.0))
}

/// Writes `epoch,train_loss,val_loss,val_errors,lr` lines.
pub fn write_history_csv(
    path: &std::path::Path,
    history: &[crate::train::EpochStats],
) -> Result<(), EvalError> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,train_loss,val_loss,val_errors,lr")?;
    for h in history {
        writeln!(
            f,
            "{},{},{},{},{}",
            h.epoch, h.train_loss, h.val_loss, h.val_errors, h.lr
        )?;
    }
    Ok(())
}

/// Writes `rung,seed,error_rate` lines.
pub fn write_ablation_csv(path: &std::path::Path, report: &AblationReport) -> Result<(), EvalError> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "rung,seed,error_rate")?;
    for rung in &report.rungs {
        for (seed, e) in rung.errors.iter().enumerate() {
            writeln!(f, "{},{},{}", rung.name, seed, e)?;
        }
    }
    Ok(())
}

/// Writes box-plot-ready `rung,min,q1,median,q3,max` lines.
pub fn write_ablation_quantiles(
    path: &std::path::Path,
    report: &AblationReport,
) -> Result<(), EvalError> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "rung,min,q1,median,q3,max")?;
    for rung in &report.rungs {
        let q = rung.quantiles();
        writeln!(f, "{},{},{},{},{},{}", rung.name, q[0], q[1], q[2], q[3], q[4])?;
    }
    Ok(())
}

/// Writes `series,category,estimated,true` lines.
pub fn write_report_csv(path: &std::path::Path, report: &CountReport) -> Result<(), EvalError> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "series,category,estimated,true")?;
    for row in &report.rows {
        for (i, (&e, &t)) in row.estimated.iter().zip(&row.truth).enumerate() {
            writeln!(f, "{},{},{},{}", row.series_id, i + 1, e, t)?;
        }
    }
    Ok(())
}
