//! Deterministic streaming detector.
//!
//! One sample goes in, O(1) work happens (excluding the occasional
//! inference), and at most one detection comes out. The detector replays the
//! exact offline decision chain — rolling metric, hysteresis gate, slice
//! capture, integer inference, exclusion window — in fixed memory:
//!
//! * the metric accumulator is the same code the offline path runs, so
//!   metric values are bit-identical;
//! * slices are cut with the same alignment and zero padding;
//! * candidates inside an open exclusion window are never inferred at all
//!   (their categories are unknowable; diagnostics count them).
//!
//! All timestamps derive from the sample clock, never from wall time.

mod stream;

pub use stream::{read_stream, write_stream, StreamError};

use std::collections::VecDeque;

use crate::preprocess::{MetricConfig, RollingEnergy};
use crate::quant::{qforward, QScratch, QuantizedModel};

/// An accepted countable event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionEvent {
    /// Countable category (1-based; 0 is background and never emitted).
    pub category: usize,
    /// Trigger timestamp in seconds of sample clock.
    pub t_seconds: f64,
    pub trigger_index: u64,
}

/// What one `push_sample` produced.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Step {
    /// The gate fired at this metric index during this push.
    pub trigger: Option<u64>,
    pub detection: Option<DetectionEvent>,
}

/// Counters exposed for diagnostics and reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct RtReport {
    /// Accepted events per countable category.
    pub counts: Vec<u64>,
    pub triggers: u64,
    pub inferences: u64,
    /// Candidates skipped inside an open exclusion window.
    pub suppressed: u64,
    /// Fixed memory held by the detector (ring, queue, inference scratch).
    pub memory_bytes: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum RtError {
    #[error("{0}")]
    BadMetricConfig(#[from] crate::preprocess::MetricConfigError),
    #[error("model expects slices of {model} samples, metric config cuts {metric}")]
    InputLengthMismatch { model: usize, metric: usize },
    #[error("sample rate must be positive, got {0}")]
    BadSampleRate(f64),
}

/// Streaming state. Construct once, feed samples, then [`Detector::finish`]
/// to flush the tail with the same zero padding the offline path applies.
#[derive(Debug)]
pub struct Detector {
    cfg: MetricConfig,
    model: QuantizedModel,
    scratch: QScratch,
    sample_rate_hz: f64,
    t_m: f64,

    ring: Vec<f32>,
    arrival: i64,
    acc: RollingEnergy,
    next_metric: i64,
    armed: bool,
    pending: VecDeque<i64>,
    slice_buf: Vec<f64>,

    last_shot_t: f64,
    counts: Vec<u64>,
    triggers: u64,
    inferences: u64,
    suppressed: u64,
}

impl Detector {
    /// `min_event_duration_ms` is the exclusion window T_M.
    pub fn new(
        cfg: MetricConfig,
        model: QuantizedModel,
        sample_rate_hz: f64,
        min_event_duration_ms: f64,
    ) -> Result<Self, RtError> {
        cfg.validate()?;
        if !(sample_rate_hz > 0.0) {
            return Err(RtError::BadSampleRate(sample_rate_hz));
        }
        if model.config.input_len != cfg.input_len {
            return Err(RtError::InputLengthMismatch {
                model: model.config.input_len,
                metric: cfg.input_len,
            });
        }
        let lookahead = RollingEnergy::new(cfg.window, cfg.offset).lookahead();
        let ring_len = 2 * cfg.input_len
            + cfg.window
            + lookahead.unsigned_abs() as usize
            + cfg.offset.unsigned_abs() as usize
            + 16;
        let scratch = QScratch::for_model(&model);
        let n_counts = model.config.n_categories - 1;
        Ok(Self {
            acc: RollingEnergy::new(cfg.window, cfg.offset),
            slice_buf: vec![0.0; cfg.input_len],
            pending: VecDeque::with_capacity(cfg.input_len + cfg.window + 8),
            ring: vec![0.0; ring_len],
            arrival: -1,
            next_metric: 0,
            armed: true,
            last_shot_t: f64::NEG_INFINITY,
            counts: vec![0; n_counts],
            triggers: 0,
            inferences: 0,
            suppressed: 0,
            cfg,
            model,
            scratch,
            sample_rate_hz,
            t_m: min_event_duration_ms / 1e3,
        })
    }

    /// Feeds one sample; O(1) bookkeeping plus at most one inference.
    pub fn push_sample(&mut self, a: f32) -> Step {
        self.arrival += 1;
        let slot = (self.arrival % self.ring.len() as i64) as usize;
        self.ring[slot] = a;

        let mut step = Step::default();
        // At most one metric index becomes computable per arriving sample.
        let lookahead = self.acc.lookahead();
        if self.next_metric <= self.arrival && self.next_metric + lookahead <= self.arrival {
            step.trigger = self.advance_metric();
        }
        step.detection = self.service_pending(false);
        step
    }

    fn advance_metric(&mut self) -> Option<u64> {
        let t = self.next_metric;
        self.next_metric += 1;
        let ring = &self.ring;
        let arrival = self.arrival;
        let ring_len = ring.len() as i64;
        let m = self.acc.step(|i| {
            if i < 0 || i > arrival {
                0.0
            } else {
                let v = ring[(i % ring_len) as usize] as f64;
                v * v
            }
        });
        if m < self.cfg.t_low {
            self.armed = true;
        }
        if self.armed && m >= self.cfg.t_high {
            self.armed = false;
            self.triggers += 1;
            debug_assert!(
                self.pending.len() < self.pending.capacity(),
                "pending queue exceeded its fixed bound"
            );
            self.pending.push_back(t);
            return Some(t as u64);
        }
        None
    }

    /// Index of the last sample a slice for trigger `k` needs.
    fn slice_end(&self, k: i64) -> i64 {
        k - self.cfg.pre_trigger as i64 + self.cfg.input_len as i64 - 1
    }

    fn service_pending(&mut self, flush: bool) -> Option<DetectionEvent> {
        let &k = self.pending.front()?;
        if !flush && self.slice_end(k) > self.arrival {
            return None;
        }
        self.pending.pop_front();

        let t = k as f64 / self.sample_rate_hz;
        // Inside an open exclusion window: never inferred, category unknowable.
        if t > self.last_shot_t && t <= self.last_shot_t + self.t_m {
            self.suppressed += 1;
            return None;
        }

        let start = k - self.cfg.pre_trigger as i64;
        for (j, out) in self.slice_buf.iter_mut().enumerate() {
            let i = start + j as i64;
            *out = if i < 0 || i > self.arrival {
                0.0
            } else {
                debug_assert!(self.arrival - i < self.ring.len() as i64);
                self.ring[(i % self.ring.len() as i64) as usize] as f64
            };
        }
        self.inferences += 1;
        let probs = qforward(&self.model, &self.slice_buf, &mut self.scratch);
        let category = crate::quant::argmax(&probs);
        if category == crate::signal::NON_SHOT {
            return None;
        }
        self.last_shot_t = t;
        self.counts[category - 1] += 1;
        Some(DetectionEvent {
            category,
            t_seconds: t,
            trigger_index: k as u64,
        })
    }

    /// Flushes the stream tail: remaining metric indices and pending slices
    /// see zeros past the end, exactly like the offline path. Consumes the
    /// detector; no samples can follow the end of a stream.
    pub fn finish(mut self) -> (Vec<DetectionEvent>, RtReport) {
        let n = self.arrival + 1;
        let mut events = Vec::new();
        while self.next_metric < n {
            self.advance_metric();
            if let Some(ev) = self.service_pending(false) {
                events.push(ev);
            }
        }
        while !self.pending.is_empty() {
            if let Some(ev) = self.service_pending(true) {
                events.push(ev);
            }
        }
        let report = self.report();
        (events, report)
    }

    /// Current per-category totals and diagnostics.
    pub fn report(&self) -> RtReport {
        RtReport {
            counts: self.counts.clone(),
            triggers: self.triggers,
            inferences: self.inferences,
            suppressed: self.suppressed,
            memory_bytes: self.memory_bytes(),
        }
    }

    /// Fixed memory held by the detector; constant from construction on.
    pub fn memory_bytes(&self) -> usize {
        self.ring.len() * 4
            + self.pending.capacity() * 8
            + self.slice_buf.len() * 8
            + self.scratch.bytes()
    }
}

/// Runs a whole recording through a fresh detector and collects everything;
/// the equivalence harness and the CLI replay share this.
pub fn replay(
    cfg: &MetricConfig,
    model: &QuantizedModel,
    sample_rate_hz: f64,
    min_event_duration_ms: f64,
    samples: &[f32],
) -> Result<(Vec<u64>, Vec<DetectionEvent>, RtReport), RtError> {
    let mut det = Detector::new(cfg.clone(), model.clone(), sample_rate_hz, min_event_duration_ms)?;
    let mut triggers = Vec::new();
    let mut events = Vec::new();
    for &a in samples {
        let step = det.push_sample(a);
        if let Some(t) = step.trigger {
            triggers.push(t);
        }
        if let Some(ev) = step.detection {
            events.push(ev);
        }
    }
    let (tail, report) = det.finish();
    events.extend(tail);
    Ok((triggers, events, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ConvSpec, NetworkConfig};
    use crate::preprocess::{compute_metric, extract_candidates};
    use crate::quant::{calibrate_and_quantize, QuantConfig};
    use crate::signal::{synthesize_series, BinKey, SeriesPlan};
    use crate::train::simple_post_filter;

    fn test_model(metric: &MetricConfig, seed: u64) -> QuantizedModel {
        let net = NetworkConfig {
            input_len: metric.input_len,
            conv: vec![ConvSpec { kernel: 9, channels: 4, pool: 4 }],
            hidden_units: 8,
            n_categories: 2,
            activation_clip: Some(6.0),
        };
        let params = init_params(&net, seed).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let calib: Vec<Vec<f64>> = (0..32)
            .map(|_| (0..net.input_len).map(|_| rng.random_range(-4.0..4.0)).collect())
            .collect();
        calibrate_and_quantize(&params, &calib, QuantConfig::default()).unwrap()
    }

    fn metric_cfg() -> MetricConfig {
        MetricConfig {
            window: 32,
            offset: 0,
            t_high: 0.15,
            t_low: 0.02,
            input_len: 64,
            pre_trigger: 32,
        }
    }

    #[test]
    fn pure_noise_never_triggers_or_infers() {
        let cfg = metric_cfg();
        let model = test_model(&cfg, 1);
        let (series, _) = crate::presets::noise_recording(3, 1.0);
        let (triggers, events, report) =
            replay(&cfg, &model, series.sample_rate_hz, 40.0, &series.samples).unwrap();
        assert!(triggers.is_empty());
        assert!(events.is_empty());
        assert_eq!(report.inferences, 0);
        assert!(report.counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn streaming_matches_offline_exactly() {
        let cfg = metric_cfg();
        let model = test_model(&cfg, 2);
        let profile = crate::presets::baseline_profile(7);
        let plan = SeriesPlan::new(2.0)
            .burst(0.3, 4, 0.09, 1)
            .confuser(0.9)
            .burst(1.2, 3, 0.07, 1);
        let (series, _, _) = synthesize_series(&profile, &plan, "s", BinKey::new(), 5).unwrap();

        // Offline chain: metric, gate, integer inference, post-filter.
        let offline_cands = extract_candidates(&series, &cfg);
        let mut scratch = QScratch::for_model(&model);
        let shots: Vec<(f64, usize)> = offline_cands
            .iter()
            .filter_map(|c| {
                let probs = qforward(&model, &c.x, &mut scratch);
                let cat = crate::quant::argmax(&probs);
                (cat != 0).then_some((c.t_seconds, cat))
            })
            .collect();
        let offline_accepted = simple_post_filter(&shots, 0.040);

        let (triggers, events, _) =
            replay(&cfg, &model, series.sample_rate_hz, 40.0, &series.samples).unwrap();
        let offline_triggers: Vec<u64> =
            offline_cands.iter().map(|c| c.trigger_index as u64).collect();
        assert_eq!(triggers, offline_triggers);
        let got: Vec<(f64, usize)> = events.iter().map(|e| (e.t_seconds, e.category)).collect();
        assert_eq!(got, offline_accepted);
    }

    #[test]
    fn metric_values_are_bit_identical_to_offline() {
        // The detector shares the accumulator with the offline path; verify
        // the whole gate sees identical numbers by comparing trigger sets on
        // a signal that hovers around the thresholds.
        let cfg = MetricConfig {
            window: 5,
            offset: -2,
            t_high: 0.5,
            t_low: 0.3,
            input_len: 16,
            pre_trigger: 4,
        };
        let model = test_model(&cfg, 3);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f32> = (0..4000).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let series = crate::signal::TimeSeries {
            samples: samples.clone(),
            sample_rate_hz: 6400.0,
            series_id: "jitter".into(),
            bin_key: BinKey::new(),
        };
        let offline = compute_metric(&series, &cfg);
        let offline_triggers: Vec<u64> = {
            let mut armed = true;
            let mut out = Vec::new();
            for (k, &m) in offline.iter().enumerate() {
                if m < cfg.t_low {
                    armed = true;
                }
                if armed && m >= cfg.t_high {
                    out.push(k as u64);
                    armed = false;
                }
            }
            out
        };
        let (triggers, _, _) = replay(&cfg, &model, 6400.0, 40.0, &samples).unwrap();
        assert_eq!(triggers, offline_triggers);
    }

    #[test]
    fn two_events_inside_the_window_count_once() {
        let cfg = metric_cfg();
        let model = test_model(&cfg, 4);
        let mut profile = crate::presets::baseline_profile(9);
        profile.min_cycle_time_ms = 25.0;
        // 30 ms apart with a 40 ms window: the second is inside the first's
        // exclusion window and can never be counted.
        let plan = SeriesPlan::new(1.0).shot(0.3, 1).shot(0.33, 1);
        let (series, _, _) = synthesize_series(&profile, &plan, "s", BinKey::new(), 8).unwrap();
        let (_, events, report) =
            replay(&cfg, &model, series.sample_rate_hz, 40.0, &series.samples).unwrap();
        // Whatever the classifier thinks of individual slices, at most one
        // detection can fall in any 40 ms span.
        for pair in events.windows(2) {
            assert!(pair[1].t_seconds - pair[0].t_seconds > 0.040);
        }
        let _ = report;
    }

    #[test]
    fn counters_match_emitted_events() {
        let cfg = metric_cfg();
        let model = test_model(&cfg, 5);
        let profile = crate::presets::baseline_profile(13);
        let plan = SeriesPlan::new(2.5).burst(0.3, 5, 0.1, 1).confuser(1.4);
        let (series, _, _) = synthesize_series(&profile, &plan, "s", BinKey::new(), 2).unwrap();
        let (_, events, report) =
            replay(&cfg, &model, series.sample_rate_hz, 40.0, &series.samples).unwrap();
        let mut counts = vec![0u64; 1];
        for e in &events {
            counts[e.category - 1] += 1;
        }
        assert_eq!(report.counts, counts);
    }

    #[test]
    fn memory_footprint_is_fixed() {
        let cfg = metric_cfg();
        let model = test_model(&cfg, 6);
        let mut det = Detector::new(cfg, model, 6400.0, 40.0).unwrap();
        let before = det.memory_bytes();
        let profile = crate::presets::baseline_profile(17);
        let plan = SeriesPlan::new(1.5).burst(0.3, 6, 0.08, 1);
        let (series, _, _) = synthesize_series(&profile, &plan, "s", BinKey::new(), 3).unwrap();
        for &a in &series.samples {
            det.push_sample(a);
        }
        assert_eq!(det.memory_bytes(), before);
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let cfg = metric_cfg();
        let mut other = cfg.clone();
        other.input_len = 32;
        other.pre_trigger = 16;
        let model = test_model(&other, 7);
        assert!(matches!(
            Detector::new(cfg, model, 6400.0, 40.0),
            Err(RtError::InputLengthMismatch { .. })
        ));
    }
}
