//! Rolling-energy metric and candidate extraction.
//!
//! A recording is reduced to a handful of fixed-length candidate slices in
//! two steps: a rolling average of squared accelerations
//!
//! ```text
//! m[t] = (1/w) · Σ_{i=-⌊w/2⌋..⌊w/2⌋} a[t+i+o]²
//! ```
//!
//! and a two-threshold hysteresis gate over `m`: the gate re-arms whenever
//! the metric dips below `t_low` and fires a candidate when, armed, it rises
//! to `t_high` or above. Note the sum has `w+1` terms for even `w` but is
//! divided by `w`; the definition is kept exactly as-is because thresholds
//! are always tuned against whatever definition is in use, and a consistent
//! definition matters more than an unbiased one.
//!
//! The same accumulator type drives the offline path here and the streaming
//! detector in [`crate::rt`]; because both execute the identical sequence of
//! floating-point operations, their metric values agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::signal::TimeSeries;

/// Metric and slicing hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Metric window size `w` in samples (5 ms at the sample rate is typical).
    pub window: usize,
    /// Integer offset `o` shifting the metric relative to the signal.
    pub offset: i64,
    /// Gate firing threshold, in g².
    pub t_high: f64,
    /// Gate re-arm threshold, in g².
    pub t_low: f64,
    /// Candidate slice length |x| in samples.
    pub input_len: usize,
    /// Samples of the slice placed before the trigger index.
    pub pre_trigger: usize,
}

impl MetricConfig {
    /// 5 ms window at the given rate, slice aligned one window ahead of the
    /// trigger. Thresholds are calibrated for the synthetic profiles in
    /// [`crate::presets`]; real deployments tune them per sensor.
    pub fn for_sample_rate(sample_rate_hz: f64) -> Self {
        let window = (0.005 * sample_rate_hz).round().max(1.0) as usize;
        Self {
            window,
            offset: 0,
            t_high: 0.25,
            t_low: 0.02,
            input_len: 232,
            pre_trigger: window,
        }
    }

    pub fn validate(&self) -> Result<(), MetricConfigError> {
        if self.window < 1 {
            return Err(MetricConfigError("window must be >= 1".into()));
        }
        if !(self.t_low > 0.0) {
            return Err(MetricConfigError("t_low must be > 0".into()));
        }
        if self.t_high < self.t_low {
            return Err(MetricConfigError("t_high must be >= t_low".into()));
        }
        if self.input_len < 1 {
            return Err(MetricConfigError("input_len must be >= 1".into()));
        }
        if self.pre_trigger >= self.input_len {
            return Err(MetricConfigError(format!(
                "pre_trigger ({}) must be < input_len ({})",
                self.pre_trigger, self.input_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid metric config: {0}")]
pub struct MetricConfigError(String);

/// A fixed-length slice of the input handed to the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// `input_len` acceleration samples, zero-padded at series edges.
    pub x: Vec<f64>,
    /// Trigger timestamp in seconds (trigger index / sample rate).
    pub t_seconds: f64,
    pub series_id: String,
    /// First sample index of the slice; negative when the slice begins
    /// before the recording.
    pub start: i64,
    /// Metric index at which the gate fired.
    pub trigger_index: usize,
}

/// Compensated running sum over the metric window.
///
/// One `step` produces the metric value for the next index `t` by adding the
/// squared sample entering the window and removing the one leaving it.
/// Neumaier compensation keeps the running sum within one ulp of a fresh
/// summation, so long recordings do not drift. Both the offline and the
/// streaming path run this exact code.
#[derive(Debug, Clone)]
pub(crate) struct RollingEnergy {
    w: f64,
    half: i64,
    offset: i64,
    sum: f64,
    comp: f64,
    next_t: i64,
    primed: bool,
}

impl RollingEnergy {
    pub(crate) fn new(window: usize, offset: i64) -> Self {
        Self {
            w: window as f64,
            half: (window / 2) as i64,
            offset,
            sum: 0.0,
            comp: 0.0,
            next_t: 0,
            primed: false,
        }
    }

    /// Highest sample index `step` will read for metric index `t`.
    pub(crate) fn lookahead(&self) -> i64 {
        self.offset + self.half
    }

    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    /// Metric value for the next index. `squared` must return the squared
    /// sample at an absolute index, and 0.0 outside the recording.
    pub(crate) fn step<F: Fn(i64) -> f64>(&mut self, squared: F) -> f64 {
        let t = self.next_t;
        if !self.primed {
            for i in (t + self.offset - self.half)..=(t + self.offset + self.half) {
                self.add(squared(i));
            }
            self.primed = true;
        } else {
            self.add(squared(t + self.offset + self.half));
            self.add(-squared(t - 1 + self.offset - self.half));
        }
        self.next_t = t + 1;
        (self.sum + self.comp) / self.w
    }
}

/// Computes the rolling-energy metric for a whole recording. The output has
/// one value per input sample; samples outside the recording count as zero.
pub fn compute_metric(series: &TimeSeries, cfg: &MetricConfig) -> Vec<f64> {
    let samples = &series.samples;
    let n = samples.len() as i64;
    let squared = |i: i64| -> f64 {
        if i < 0 || i >= n {
            0.0
        } else {
            let v = samples[i as usize] as f64;
            v * v
        }
    };
    let mut acc = RollingEnergy::new(cfg.window, cfg.offset);
    (0..samples.len()).map(|_| acc.step(squared)).collect()
}

/// Runs the hysteresis gate over a precomputed metric and cuts one slice per
/// trigger. The gate starts armed; a pure-noise recording that never reaches
/// `t_high` yields no candidates.
pub fn generate_candidates(
    series: &TimeSeries,
    metric: &[f64],
    cfg: &MetricConfig,
) -> Vec<Candidate> {
    let mut armed = true;
    let mut out = Vec::new();
    for (k, &m) in metric.iter().enumerate() {
        if m < cfg.t_low {
            armed = true;
        }
        if armed && m >= cfg.t_high {
            out.push(cut_slice(series, k, cfg));
            armed = false;
        }
    }
    out
}

/// Metric plus gate in one call.
pub fn extract_candidates(series: &TimeSeries, cfg: &MetricConfig) -> Vec<Candidate> {
    let metric = compute_metric(series, cfg);
    generate_candidates(series, &metric, cfg)
}

pub(crate) fn cut_slice(series: &TimeSeries, trigger_index: usize, cfg: &MetricConfig) -> Candidate {
    let n = series.samples.len() as i64;
    let start = trigger_index as i64 - cfg.pre_trigger as i64;
    let x = (0..cfg.input_len as i64)
        .map(|i| {
            let idx = start + i;
            if idx < 0 || idx >= n {
                0.0
            } else {
                series.samples[idx as usize] as f64
            }
        })
        .collect();
    Candidate {
        x,
        t_seconds: trigger_index as f64 / series.sample_rate_hz,
        series_id: series.series_id.clone(),
        start,
        trigger_index,
    }
}
