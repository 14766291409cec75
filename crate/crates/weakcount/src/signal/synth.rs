//! Synthetic recordings with planted ground truth.
//!
//! Real acquisition campaigns for this problem are proprietary, so the crate
//! ships a generator instead. A planted impulse event is a sharp ignition
//! transient followed by one to three delayed mechanical sub-events, each a
//! decaying sinusoid with jittered amplitude and phase. Confuser events (falls,
//! manipulations) reuse the same transient family at lower energy and
//! different timing, so an energy threshold alone cannot separate the classes
//! and the learning problem stays non-trivial.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BinKey, GroundTruth, TimeSeries, WeakLabel};

/// Inclusive parameter range, sampled uniformly per event.
pub type Range = (f64, f64);

/// Waveform family for one countable event category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotTemplate {
    /// Peak amplitude of the ignition transient, in g.
    pub amplitude_g: Range,
    /// Ring frequency of the ignition transient, Hz.
    pub ignition_freq_hz: Range,
    /// Exponential decay constant of the ignition transient, ms.
    pub ignition_decay_ms: Range,
    /// How many delayed mechanical sub-events follow (inclusive range).
    pub sub_events: (usize, usize),
    /// Delay of each sub-event after the previous transient, ms.
    pub sub_delay_ms: Range,
    /// Sub-event amplitude relative to the ignition amplitude.
    pub sub_level: Range,
    pub sub_freq_hz: Range,
    pub sub_decay_ms: Range,
}

/// Waveform family for non-countable disturbances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfuserTemplate {
    pub amplitude_g: Range,
    pub freq_hz: Range,
    pub decay_ms: Range,
    /// Number of bumps (a fall often bounces).
    pub bumps: (usize, usize),
    pub bump_gap_ms: Range,
}

/// Everything the generator needs for one bin of external-variable settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    /// One template per countable category, index 0 ↔ category 1.
    pub shots: Vec<ShotTemplate>,
    pub confuser: ConfuserTemplate,
    /// Standard deviation of the background noise, in g.
    pub noise_sigma_g: f64,
    /// Hard lower bound between consecutive countable events, ms.
    pub min_cycle_time_ms: f64,
    /// Typical inter-shot gap for plan generators, ms.
    pub cycle_time_ms: Range,
    /// Typical burst length for plan generators.
    pub burst_len: (usize, usize),
    /// Per-bin modifier: scales every rendered amplitude.
    pub amplitude_scale: f64,
    /// Per-bin modifier: scales every rendered frequency.
    pub freq_scale: f64,
    pub sample_rate_hz: f64,
    pub seed: u64,
}

impl SynthProfile {
    fn validate(&self) -> Result<(), PlanError> {
        if self.min_cycle_time_ms <= 0.0 {
            return Err(PlanError::BadProfile("min_cycle_time_ms must be > 0".into()));
        }
        if self.shots.is_empty() {
            return Err(PlanError::BadProfile("profile needs at least one shot template".into()));
        }
        for (i, t) in self.shots.iter().enumerate() {
            if t.amplitude_g.0 <= 0.0 {
                return Err(PlanError::BadProfile(format!(
                    "shot template {i}: amplitude range must be positive"
                )));
            }
        }
        if self.confuser.amplitude_g.0 <= 0.0 {
            return Err(PlanError::BadProfile("confuser amplitude range must be positive".into()));
        }
        Ok(())
    }
}

/// What kind of event to plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannedEventKind {
    /// A countable event of the given category (1-based; 0 is background).
    Shot { category: usize },
    Confuser,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannedEvent {
    pub onset_s: f64,
    pub kind: PlannedEventKind,
}

/// A shooting-sequence description: where to plant which events.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeriesPlan {
    pub duration_s: f64,
    pub events: Vec<PlannedEvent>,
}

impl SeriesPlan {
    pub fn new(duration_s: f64) -> Self {
        Self {
            duration_s,
            events: Vec::new(),
        }
    }

    pub fn shot(mut self, onset_s: f64, category: usize) -> Self {
        self.events.push(PlannedEvent {
            onset_s,
            kind: PlannedEventKind::Shot { category },
        });
        self
    }

    /// Plants `rounds` shots of one category, `cycle_s` apart.
    pub fn burst(mut self, start_s: f64, rounds: usize, cycle_s: f64, category: usize) -> Self {
        for i in 0..rounds {
            self.events.push(PlannedEvent {
                onset_s: start_s + i as f64 * cycle_s,
                kind: PlannedEventKind::Shot { category },
            });
        }
        self
    }

    pub fn confuser(mut self, onset_s: f64) -> Self {
        self.events.push(PlannedEvent {
            onset_s,
            kind: PlannedEventKind::Confuser,
        });
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("invalid profile: {0}")]
    BadProfile(String),
    #[error("plan duration must be positive, got {0}")]
    BadDuration(f64),
    #[error("event at {onset_s}s lies outside the {duration_s}s recording")]
    OutOfRange { onset_s: f64, duration_s: f64 },
    #[error("shot category {category} out of range (profile has {n_shot_categories} shot categories)")]
    BadCategory {
        category: usize,
        n_shot_categories: usize,
    },
    #[error(
        "shots at {first_s:.4}s and {second_s:.4}s are {gap_ms:.2}ms apart, \
         below the minimum cycle time of {min_ms:.2}ms"
    )]
    CycleTimeViolation {
        first_s: f64,
        second_s: f64,
        gap_ms: f64,
        min_ms: f64,
    },
}

/// splitmix64 over the pair; decorrelates derived RNG streams.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_range(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    if r.0 >= r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

/// Renders one plan into a recording, its weak label, and the planted truth.
///
/// Deterministic for a fixed `(profile.seed, seed)` pair. The weak label is
/// the per-category histogram of planted countable events by construction.
/// Fails if two countable events are closer than the profile's minimum cycle
/// time.
pub fn synthesize_series(
    profile: &SynthProfile,
    plan: &SeriesPlan,
    series_id: &str,
    bin_key: BinKey,
    seed: u64,
) -> Result<(TimeSeries, WeakLabel, GroundTruth), PlanError> {
    profile.validate()?;
    if !(plan.duration_s > 0.0) {
        return Err(PlanError::BadDuration(plan.duration_s));
    }
    let n_shot_categories = profile.shots.len();
    let mut events = plan.events.clone();
    events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));

    let mut last_shot_onset: Option<f64> = None;
    for ev in &events {
        if ev.onset_s < 0.0 || ev.onset_s >= plan.duration_s {
            return Err(PlanError::OutOfRange {
                onset_s: ev.onset_s,
                duration_s: plan.duration_s,
            });
        }
        if let PlannedEventKind::Shot { category } = ev.kind {
            if category == 0 || category > n_shot_categories {
                return Err(PlanError::BadCategory {
                    category,
                    n_shot_categories,
                });
            }
            if let Some(prev) = last_shot_onset {
                let gap_ms = (ev.onset_s - prev) * 1e3;
                if gap_ms < profile.min_cycle_time_ms {
                    return Err(PlanError::CycleTimeViolation {
                        first_s: prev,
                        second_s: ev.onset_s,
                        gap_ms,
                        min_ms: profile.min_cycle_time_ms,
                    });
                }
            }
            last_shot_onset = Some(ev.onset_s);
        }
    }

    let rate = profile.sample_rate_hz;
    let n = (plan.duration_s * rate).round() as usize;
    let mut buf = vec![0.0f64; n];

    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(profile.seed, seed));
    if profile.noise_sigma_g > 0.0 {
        let normal = Normal::new(0.0, profile.noise_sigma_g).expect("sigma is finite");
        for s in buf.iter_mut() {
            *s = normal.sample(&mut noise_rng);
        }
    }

    let mut event_rng = ChaCha8Rng::seed_from_u64(mix_seed(profile.seed ^ 0xE7E7, seed));
    let mut truth = GroundTruth::default();
    let mut counts = vec![0u32; n_shot_categories];

    for ev in &events {
        let onset_idx = (ev.onset_s * rate).round() as usize;
        match ev.kind {
            PlannedEventKind::Shot { category } => {
                render_shot(
                    &mut buf,
                    onset_idx,
                    &profile.shots[category - 1],
                    profile,
                    &mut event_rng,
                );
                truth.events.push((onset_idx, category));
                counts[category - 1] += 1;
            }
            PlannedEventKind::Confuser => {
                render_confuser(&mut buf, onset_idx, &profile.confuser, profile, &mut event_rng);
            }
        }
    }

    let series = TimeSeries {
        samples: buf.into_iter().map(|v| v as f32).collect(),
        sample_rate_hz: rate,
        series_id: series_id.to_string(),
        bin_key,
    };
    Ok((series, WeakLabel::new(counts), truth))
}

fn add_ring(buf: &mut [f64], start: usize, rate: f64, amp: f64, freq_hz: f64, decay_ms: f64, phase: f64) {
    let tau_samples = decay_ms * 1e-3 * rate;
    // Render until the envelope is below 1e-4 of the peak.
    let len = (tau_samples * 9.3).ceil() as usize;
    let omega = 2.0 * std::f64::consts::PI * freq_hz / rate;
    for i in 0..len {
        let idx = start + i;
        if idx >= buf.len() {
            break;
        }
        let t = i as f64;
        buf[idx] += amp * (-t / tau_samples).exp() * (omega * t + phase).sin();
    }
}

fn render_shot(
    buf: &mut [f64],
    onset: usize,
    tpl: &ShotTemplate,
    profile: &SynthProfile,
    rng: &mut ChaCha8Rng,
) {
    let rate = profile.sample_rate_hz;
    let amp = sample_range(rng, tpl.amplitude_g) * profile.amplitude_scale;
    let freq = sample_range(rng, tpl.ignition_freq_hz) * profile.freq_scale;
    let decay = sample_range(rng, tpl.ignition_decay_ms);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    add_ring(buf, onset, rate, amp, freq, decay, phase);

    let n_sub = if tpl.sub_events.0 >= tpl.sub_events.1 {
        tpl.sub_events.0
    } else {
        rng.random_range(tpl.sub_events.0..=tpl.sub_events.1)
    };
    let mut at_ms = 0.0;
    for _ in 0..n_sub {
        at_ms += sample_range(rng, tpl.sub_delay_ms);
        let sub_amp = amp * sample_range(rng, tpl.sub_level);
        let sub_freq = sample_range(rng, tpl.sub_freq_hz) * profile.freq_scale;
        let sub_decay = sample_range(rng, tpl.sub_decay_ms);
        let sub_phase = rng.random_range(0.0..std::f64::consts::TAU);
        let start = onset + (at_ms * 1e-3 * rate).round() as usize;
        add_ring(buf, start, rate, sub_amp, sub_freq, sub_decay, sub_phase);
    }
}

fn render_confuser(
    buf: &mut [f64],
    onset: usize,
    tpl: &ConfuserTemplate,
    profile: &SynthProfile,
    rng: &mut ChaCha8Rng,
) {
    let rate = profile.sample_rate_hz;
    let amp = sample_range(rng, tpl.amplitude_g) * profile.amplitude_scale;
    let n_bumps = if tpl.bumps.0 >= tpl.bumps.1 {
        tpl.bumps.0
    } else {
        rng.random_range(tpl.bumps.0..=tpl.bumps.1)
    };
    let mut at_ms = 0.0;
    for b in 0..n_bumps {
        if b > 0 {
            at_ms += sample_range(rng, tpl.bump_gap_ms);
        }
        let bump_amp = if b == 0 { amp } else { amp * rng.random_range(0.4..0.9) };
        let freq = sample_range(rng, tpl.freq_hz) * profile.freq_scale;
        let decay = sample_range(rng, tpl.decay_ms);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let start = onset + (at_ms * 1e-3 * rate).round() as usize;
        add_ring(buf, start, rate, bump_amp, freq, decay, phase);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn test_profile() -> SynthProfile {
        SynthProfile {
            shots: vec![ShotTemplate {
                amplitude_g: (3.0, 6.0),
                ignition_freq_hz: (600.0, 900.0),
                ignition_decay_ms: (1.0, 2.0),
                sub_events: (1, 2),
                sub_delay_ms: (6.0, 12.0),
                sub_level: (0.4, 0.8),
                sub_freq_hz: (400.0, 700.0),
                sub_decay_ms: (1.5, 3.0),
            }],
            confuser: ConfuserTemplate {
                amplitude_g: (0.8, 2.0),
                freq_hz: (150.0, 350.0),
                decay_ms: (4.0, 9.0),
                bumps: (1, 2),
                bump_gap_ms: (25.0, 60.0),
            },
            noise_sigma_g: 0.02,
            min_cycle_time_ms: 50.0,
            cycle_time_ms: (60.0, 110.0),
            burst_len: (3, 8),
            amplitude_scale: 1.0,
            freq_scale: 1.0,
            sample_rate_hz: 6400.0,
            seed: 11,
        }
    }

    #[test]
    fn empty_plan_gives_pure_noise_and_zero_counts() {
        let profile = test_profile();
        let plan = SeriesPlan::new(0.5);
        let (series, label, truth) =
            synthesize_series(&profile, &plan, "s0", BinKey::new(), 1).unwrap();
        assert_eq!(label.counts, vec![0]);
        assert!(truth.events.is_empty());
        assert_eq!(series.len(), 3200);
        let max = series.samples.iter().fold(0f32, |m, v| m.max(v.abs()));
        assert!(max < 0.2, "pure noise should stay near zero, max={max}");
    }

    #[test]
    fn burst_counts_match_planted_events() {
        let profile = test_profile();
        let plan = SeriesPlan::new(1.0).burst(0.2, 3, 0.08, 1);
        let (_, label, truth) =
            synthesize_series(&profile, &plan, "s0", BinKey::new(), 2).unwrap();
        assert_eq!(label.counts, vec![3]);
        assert_eq!(truth.events.len(), 3);
        assert_eq!(label.counts, truth.category_counts(2));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let profile = test_profile();
        let plan = SeriesPlan::new(1.0).burst(0.1, 4, 0.09, 1).confuser(0.7);
        let a = synthesize_series(&profile, &plan, "s0", BinKey::new(), 33).unwrap();
        let b = synthesize_series(&profile, &plan, "s0", BinKey::new(), 33).unwrap();
        assert_eq!(a.0.samples, b.0.samples);
        let c = synthesize_series(&profile, &plan, "s0", BinKey::new(), 34).unwrap();
        assert_ne!(a.0.samples, c.0.samples, "different seed must change the noise");
    }

    #[test]
    fn cycle_time_violation_is_rejected() {
        let profile = test_profile();
        let plan = SeriesPlan::new(1.0).shot(0.2, 1).shot(0.23, 1);
        let err = synthesize_series(&profile, &plan, "s0", BinKey::new(), 0).unwrap_err();
        assert!(matches!(err, PlanError::CycleTimeViolation { .. }));
        let msg = err.to_string();
        assert!(msg.contains("minimum cycle time"), "descriptive error: {msg}");
    }

    #[test]
    fn confusers_are_exempt_from_cycle_time() {
        let profile = test_profile();
        let plan = SeriesPlan::new(1.0).shot(0.2, 1).confuser(0.21);
        assert!(synthesize_series(&profile, &plan, "s0", BinKey::new(), 0).is_ok());
    }

    #[test]
    fn unknown_category_is_rejected() {
        let profile = test_profile();
        let plan = SeriesPlan::new(1.0).shot(0.2, 2);
        assert!(matches!(
            synthesize_series(&profile, &plan, "s0", BinKey::new(), 0),
            Err(PlanError::BadCategory { .. })
        ));
    }
}
