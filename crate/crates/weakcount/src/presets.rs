//! Ready-made synthetic profiles, generator configurations, and benchmark
//! datasets.
//!
//! The benchmarks exist so the whole pipeline can be exercised end to end
//! with planted ground truth: a two-class counting problem (impulse events
//! vs. everything else), a three-class discrimination problem with
//! overlapping event families, and a smaller burst-heavy set for the
//! ablation ladder. Bins model external-variable combinations by scaling
//! template amplitude and frequency per bin.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ConvSpec, NetworkConfig};
use crate::preprocess::MetricConfig;
use crate::signal::{
    mix_seed, split_dataset, synthesize_series, BinKey, ConfuserTemplate, Dataset, PlanError,
    Record, SeriesPlan, ShotTemplate, SynthProfile, TimeSeries, WeakLabel,
};
use crate::train::{Switches, TrainConfig, VatConfig};

/// Single-category profile used across unit tests and as a template for the
/// benchmark bins.
pub fn baseline_profile(seed: u64) -> SynthProfile {
    SynthProfile {
        shots: vec![ShotTemplate {
            amplitude_g: (3.0, 6.0),
            ignition_freq_hz: (600.0, 900.0),
            ignition_decay_ms: (1.0, 2.0),
            sub_events: (1, 2),
            sub_delay_ms: (6.0, 12.0),
            sub_level: (0.5, 0.9),
            sub_freq_hz: (450.0, 750.0),
            sub_decay_ms: (1.5, 3.0),
        }],
        confuser: ConfuserTemplate {
            amplitude_g: (0.8, 2.2),
            freq_hz: (130.0, 320.0),
            decay_ms: (4.0, 9.0),
            bumps: (1, 2),
            bump_gap_ms: (25.0, 60.0),
        },
        noise_sigma_g: 0.02,
        min_cycle_time_ms: 50.0,
        cycle_time_ms: (60.0, 110.0),
        burst_len: (3, 6),
        amplitude_scale: 1.0,
        freq_scale: 1.0,
        sample_rate_hz: 6400.0,
        seed,
    }
}

/// A second countable category whose ignition ring overlaps the first —
/// the discrimination benchmark has to tell them apart by waveform detail,
/// not by energy.
fn overlapping_second_category() -> ShotTemplate {
    ShotTemplate {
        amplitude_g: (3.0, 6.0),
        ignition_freq_hz: (850.0, 1150.0),
        ignition_decay_ms: (1.6, 2.8),
        sub_events: (2, 3),
        sub_delay_ms: (4.0, 9.0),
        sub_level: (0.5, 0.85),
        sub_freq_hz: (650.0, 950.0),
        sub_decay_ms: (2.0, 3.5),
    }
}

/// One bin of the generator: an external-variable combination and the
/// profile it renders with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub key: BinKey,
    pub profile: SynthProfile,
}

/// A complete dataset recipe. Everything is deterministic given `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Category names including the background at index 0.
    pub category_names: Vec<String>,
    pub bins: Vec<BinSpec>,
    pub recordings_per_bin: usize,
    /// Recordings with confusers only (the false-positive rows).
    pub non_shot_recordings_per_bin: usize,
    pub bursts_per_recording: (usize, usize),
    pub rounds_per_burst: (usize, usize),
    pub confusers_per_recording: (usize, usize),
    pub confusers_per_non_shot_recording: (usize, usize),
    pub seed: u64,
}

fn sample_usize(rng: &mut ChaCha8Rng, r: (usize, usize)) -> usize {
    if r.0 >= r.1 {
        r.0
    } else {
        rng.random_range(r.0..=r.1)
    }
}

/// Renders the recipe into a dataset with ground truth attached.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset, PlanError> {
    let mut ds = Dataset::new(cfg.category_names.clone());
    let n_shot_categories = cfg.category_names.len() - 1;
    for (bin_no, bin) in cfg.bins.iter().enumerate() {
        for rec_no in 0..cfg.recordings_per_bin {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, (bin_no * 10_000 + rec_no) as u64));
            let category = 1 + (bin_no + rec_no) % n_shot_categories;
            let plan = shooting_plan(&mut rng, &bin.profile, cfg, category);
            push_record(&mut ds, bin, &plan, bin_no, rec_no, cfg.seed, "rec")?;
        }
        for rec_no in 0..cfg.non_shot_recordings_per_bin {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                cfg.seed ^ 0xBEEF,
                (bin_no * 10_000 + rec_no) as u64,
            ));
            let plan = non_shot_plan(&mut rng, cfg);
            push_record(&mut ds, bin, &plan, bin_no, rec_no, cfg.seed ^ 0xBEEF, "bg")?;
        }
    }
    Ok(ds)
}

fn push_record(
    ds: &mut Dataset,
    bin: &BinSpec,
    plan: &SeriesPlan,
    bin_no: usize,
    rec_no: usize,
    seed: u64,
    prefix: &str,
) -> Result<(), PlanError> {
    let series_id = format!("{prefix}_{bin_no}_{rec_no}");
    let (series, label, truth) = synthesize_series(
        &bin.profile,
        plan,
        &series_id,
        bin.key.clone(),
        mix_seed(seed, (bin_no * 131 + rec_no) as u64),
    )?;
    ds.records.push(Record {
        series,
        label,
        truth: Some(truth),
    });
    Ok(())
}

fn shooting_plan(
    rng: &mut ChaCha8Rng,
    profile: &SynthProfile,
    cfg: &GeneratorConfig,
    category: usize,
) -> SeriesPlan {
    let mut plan = SeriesPlan::new(0.0);
    let mut t = rng.random_range(0.25..0.45);
    let n_bursts = sample_usize(rng, cfg.bursts_per_recording);
    let mut confusers_left = sample_usize(rng, cfg.confusers_per_recording);
    for _ in 0..n_bursts {
        let rounds = sample_usize(rng, cfg.rounds_per_burst);
        for _ in 0..rounds {
            plan = plan.shot(t, category);
            t += rng.random_range(profile.cycle_time_ms.0..profile.cycle_time_ms.1) / 1e3;
        }
        // Quiet gap after the burst; sometimes a manipulation lands in it.
        t += rng.random_range(0.25..0.45);
        if confusers_left > 0 && rng.random_bool(0.7) {
            plan = plan.confuser(t);
            confusers_left -= 1;
            t += rng.random_range(0.25..0.45);
        }
    }
    for _ in 0..confusers_left {
        plan = plan.confuser(t);
        t += rng.random_range(0.25..0.45);
    }
    plan.duration_s = t + 0.2;
    plan
}

fn non_shot_plan(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> SeriesPlan {
    let mut plan = SeriesPlan::new(0.0);
    let mut t = rng.random_range(0.2..0.4);
    for _ in 0..sample_usize(rng, cfg.confusers_per_non_shot_recording) {
        plan = plan.confuser(t);
        t += rng.random_range(0.2..0.5);
    }
    plan.duration_s = t + 0.2;
    plan
}

/// Ten bins across two external variables, scaling amplitude and frequency.
fn make_bins(base: &SynthProfile, n_bins: usize) -> Vec<BinSpec> {
    (0..n_bins)
        .map(|b| {
            let mount = if b % 2 == 0 { "rigid" } else { "elastic" };
            let load = b / 2;
            let mut profile = base.clone();
            profile.amplitude_scale = 0.8 + 0.12 * load as f64;
            profile.freq_scale = if b % 2 == 0 { 1.0 } else { 0.93 };
            profile.seed = base.seed ^ (b as u64);
            BinSpec {
                key: BinKey::new()
                    .with("mount", mount)
                    .with("load", &format!("{load}")),
                profile,
            }
        })
        .collect()
}

/// Everything needed for one end-to-end benchmark run.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub metric: MetricConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub learning: Dataset,
    pub validation: Dataset,
    pub pretrain_learning: Dataset,
    pub pretrain_validation: Dataset,
}

fn benchmark_metric() -> MetricConfig {
    MetricConfig {
        window: 32,
        offset: 0,
        t_high: 0.15,
        t_low: 0.02,
        input_len: 64,
        pre_trigger: 32,
    }
}

fn benchmark_network(n_categories: usize) -> NetworkConfig {
    NetworkConfig {
        input_len: 64,
        conv: vec![
            ConvSpec { kernel: 9, channels: 8, pool: 4 },
            ConvSpec { kernel: 7, channels: 8, pool: 2 },
        ],
        hidden_units: 24,
        n_categories,
        activation_clip: Some(6.0),
    }
}

fn benchmark_train(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.02,
        momentum: 0.9,
        halve_patience: 8,
        stop_patience: 16,
        min_improvement: 1e-5,
        max_epochs: 60,
        min_event_duration_ms: 40.0,
        vat: VatConfig { epsilon: 1.0, ..VatConfig::default() },
        vat_on_masked: true,
        switches: Switches::all_on(),
        group_size: 4,
        seed,
    }
}

/// The two-class counting benchmark: ten bins, about two thousand planted
/// events, about five hundred confusers.
pub fn two_class_benchmark(seed: u64) -> Benchmark {
    let base = baseline_profile(seed);
    let gen = GeneratorConfig {
        category_names: vec!["non-shot".into(), "shot".into()],
        bins: make_bins(&base, 10),
        recordings_per_bin: 16,
        non_shot_recordings_per_bin: 3,
        bursts_per_recording: (2, 4),
        rounds_per_burst: (3, 6),
        confusers_per_recording: (1, 2),
        confusers_per_non_shot_recording: (5, 9),
        seed: mix_seed(seed, 2),
    };
    let target = generate(&gen).expect("benchmark plans respect the cycle time");

    // Wider pre-training data: same event family rendered under more
    // extreme external settings.
    let mut wide = base.clone();
    wide.shots[0].ignition_freq_hz = (520.0, 980.0);
    wide.shots[0].amplitude_g = (2.5, 7.0);
    let pre_gen = GeneratorConfig {
        category_names: vec!["non-shot".into(), "shot".into()],
        bins: make_bins(&wide, 6),
        recordings_per_bin: 8,
        non_shot_recordings_per_bin: 2,
        bursts_per_recording: (2, 3),
        rounds_per_burst: (3, 6),
        confusers_per_recording: (1, 2),
        confusers_per_non_shot_recording: (4, 7),
        seed: mix_seed(seed, 3),
    };
    let pretrain = generate(&pre_gen).expect("benchmark plans respect the cycle time");

    split_benchmark(target, pretrain, 2, seed)
}

/// The three-class discrimination benchmark: two countable categories with
/// overlapping waveform families.
pub fn three_class_benchmark(seed: u64) -> Benchmark {
    let mut base = baseline_profile(seed ^ 0x333);
    base.shots.push(overlapping_second_category());
    let gen = GeneratorConfig {
        category_names: vec!["non-shot".into(), "live".into(), "training".into()],
        bins: make_bins(&base, 10),
        recordings_per_bin: 14,
        non_shot_recordings_per_bin: 3,
        bursts_per_recording: (2, 4),
        rounds_per_burst: (3, 6),
        confusers_per_recording: (1, 2),
        confusers_per_non_shot_recording: (5, 9),
        seed: mix_seed(seed, 5),
    };
    let target = generate(&gen).expect("benchmark plans respect the cycle time");

    let mut wide = base.clone();
    for s in wide.shots.iter_mut() {
        s.amplitude_g = (2.5, 7.0);
    }
    let pre_gen = GeneratorConfig {
        category_names: gen.category_names.clone(),
        bins: make_bins(&wide, 6),
        recordings_per_bin: 8,
        non_shot_recordings_per_bin: 2,
        bursts_per_recording: (2, 3),
        rounds_per_burst: (3, 6),
        confusers_per_recording: (1, 2),
        confusers_per_non_shot_recording: (4, 7),
        seed: mix_seed(seed, 7),
    };
    let pretrain = generate(&pre_gen).expect("benchmark plans respect the cycle time");

    let mut bench = split_benchmark(target, pretrain, 3, seed);
    // Discrimination needs the delayed sub-events in view: a longer slice
    // with the trigger placed a third of the way in.
    bench.metric.input_len = 96;
    bench.network.input_len = 96;
    bench
}

/// A smaller burst-heavy benchmark for the ablation ladder (many duplicate
/// triggers, so the post-filter rungs have something to fix).
pub fn ablation_benchmark(seed: u64) -> Benchmark {
    let mut base = baseline_profile(seed ^ 0xAB1);
    // Sub-events are near-clones of the ignition transient, delayed past the
    // metric window: most events double-trigger and the duplicate slice is
    // genuinely indistinguishable from an onset. Counting without the
    // exclusion window has to over-count.
    base.shots[0].sub_events = (1, 1);
    base.shots[0].sub_level = (0.75, 1.0);
    base.shots[0].sub_delay_ms = (8.0, 16.0);
    base.shots[0].sub_freq_hz = base.shots[0].ignition_freq_hz;
    base.shots[0].sub_decay_ms = base.shots[0].ignition_decay_ms;
    // Confusers overlap the shots in both frequency and amplitude, so
    // rejecting them takes learned waveform detail, not an energy threshold.
    base.confuser = ConfuserTemplate {
        amplitude_g: (1.2, 3.5),
        freq_hz: (250.0, 700.0),
        decay_ms: (1.5, 5.0),
        bumps: (1, 2),
        bump_gap_ms: (25.0, 60.0),
    };
    let gen = GeneratorConfig {
        category_names: vec!["non-shot".into(), "shot".into()],
        bins: make_bins(&base, 6),
        recordings_per_bin: 4,
        non_shot_recordings_per_bin: 2,
        bursts_per_recording: (2, 3),
        rounds_per_burst: (3, 5),
        confusers_per_recording: (1, 2),
        confusers_per_non_shot_recording: (4, 6),
        seed: mix_seed(seed, 11),
    };
    let target = generate(&gen).expect("benchmark plans respect the cycle time");

    // Pre-training data: the same event family under a superset of external
    // settings, with more recordings — informative, not merely harder.
    let mut wide = base.clone();
    wide.shots[0].amplitude_g = (2.8, 6.5);
    let pre_gen = GeneratorConfig {
        category_names: gen.category_names.clone(),
        bins: make_bins(&wide, 8),
        recordings_per_bin: 7,
        non_shot_recordings_per_bin: 2,
        bursts_per_recording: (2, 3),
        rounds_per_burst: (3, 5),
        confusers_per_recording: (1, 2),
        confusers_per_non_shot_recording: (3, 5),
        seed: mix_seed(seed, 13),
    };
    let pretrain = generate(&pre_gen).expect("benchmark plans respect the cycle time");

    let mut bench = split_benchmark(target, pretrain, 2, seed);
    bench.network = NetworkConfig {
        input_len: 64,
        conv: vec![ConvSpec { kernel: 9, channels: 6, pool: 4 }],
        hidden_units: 16,
        n_categories: 2,
        activation_clip: Some(6.0),
    };
    bench.train.max_epochs = 40;
    bench.train.group_size = 20;
    bench
}

fn split_benchmark(target: Dataset, pretrain: Dataset, n_categories: usize, seed: u64) -> Benchmark {
    let (learning, validation) =
        split_dataset(target, 0.10, mix_seed(seed, 17)).expect("benchmark datasets are non-empty");
    let (pre_learn, pre_val) =
        split_dataset(pretrain, 0.10, mix_seed(seed, 19)).expect("benchmark datasets are non-empty");
    Benchmark {
        metric: benchmark_metric(),
        network: benchmark_network(n_categories),
        train: benchmark_train(seed),
        learning,
        validation,
        pretrain_learning: pre_learn,
        pretrain_validation: pre_val,
    }
}

/// A single pure-noise recording plus label, handy for smoke tests.
pub fn noise_recording(seed: u64, duration_s: f64) -> (TimeSeries, WeakLabel) {
    let profile = baseline_profile(seed);
    let plan = SeriesPlan::new(duration_s);
    let (series, label, _) =
        synthesize_series(&profile, &plan, "noise", BinKey::new(), seed).unwrap();
    (series, label)
}
