//! The `weakcount` binary: dataset synthesis, training, quantization,
//! evaluation, the ablation ladder, and stream replay.
//!
//! Exit codes: 0 success, 1 bad input (unreadable/invalid files or
//! configuration), 2 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{load_run_config, write_resolved_config, RunConfig};
use crate::eval::{
    ablation_report, baseline_weighted_random, count_dataset, write_ablation_csv,
    write_ablation_quantiles, write_history_csv, write_report_csv, AblationInputs, CountReport,
};
use crate::model::{forward, init_params, load_model, save_model, ModelFile};
use crate::quant::{
    calibrate_activation_ranges,qforward, quantize_with_ranges, QScratch, QuantConfig,
};
use crate::rt::{read_stream, write_stream, Detector};
use crate::signal::{load_dataset, mix_seed, save_dataset, split_dataset, Dataset};
use crate::train::{
    prepare_bags, train_phase, Bag, ForwardMode, PhaseResult, TrainError,
};

#[derive(Debug, Parser)]
#[command(
    name = "weakcount",
    about = "Count impulse events in accelerometer streams, trained from per-recording totals only",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the config's generator recipe.
    Synth(SynthArgs),
    /// Train a float model (optional pre-training phase, then the target
    /// dataset), selecting the best of a seed group.
    Train(TrainArgs),
    /// Quantization-aware fine-tuning plus 8-bit freeze of a float model.
    Quantize(QuantizeArgs),
    /// Count a dataset with a model and report error rates.
    Eval(EvalArgs),
    /// Run the cumulative-improvement ladder and write its report tables.
    Ablate(AblateArgs),
    /// Stream a replay file through the real-time detector.
    Replay(ReplayArgs),
    /// Extract one recording from a dataset into a stream replay file.
    Stream(StreamArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Wider dataset for the pre-training phase (required when the pretrain
    /// switch is on).
    #[arg(long)]
    pretrain_dataset: Option<PathBuf>,
    /// Write per-epoch history CSV of the winning seed here.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's group size.
    #[arg(long)]
    group_size: Option<usize>,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Evaluate the whole file, or re-derive the config's split and use one
    /// side of it.
    #[arg(long, value_parser = ["none", "learning", "validation"], default_value = "none")]
    split: String,
    /// Use the 8-bit integer path instead of the float model.
    #[arg(long)]
    quantized: bool,
    /// Also compare against the weighted-random baseline (mean ± sd).
    #[arg(long)]
    baselines: bool,
    #[arg(long)]
    report_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    pretrain_dataset: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    /// Exclusion window T_M in milliseconds.
    #[arg(long, default_value_t = 40.0)]
    min_event_duration_ms: f64,
}

#[derive(Debug, Args)]
struct StreamArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    series: String,
    #[arg(long)]
    out: PathBuf,
}

/// Input problems exit 1; failures during processing exit 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses `args` and runs the command. The binary forwards the exit code.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        // Help and version requests print and succeed.
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Input(e.to_string())),
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Stream(a) => cmd_stream(a),
    }
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    load_run_config(path).map_err(input)
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let gen = cfg
        .generator
        .as_ref()
        .ok_or_else(|| CliError::Input("config has no [generator] section".into()))?;
    let dataset = crate::presets::generate(gen).map_err(input)?;
    save_dataset(&dataset, &args.out).map_err(runtime)?;
    write_resolved_config(&cfg, &args.out).map_err(runtime)?;
    println!(
        "wrote {} recordings ({} events) to {}",
        dataset.len(),
        dataset.total_events(),
        args.out.display()
    );
    Ok(())
}

struct SplitBags {
    learning: Vec<Bag>,
    validation: Vec<Bag>,
}

fn load_and_split(cfg: &RunConfig, path: &Path) -> Result<SplitBags, CliError> {
    let dataset = load_dataset(path).map_err(input)?;
    if dataset.n_categories != cfg.network.n_categories {
        return Err(CliError::Input(format!(
            "dataset has {} categories, the network is configured for {}",
            dataset.n_categories, cfg.network.n_categories
        )));
    }
    let (learn, val) =
        split_dataset(dataset, cfg.split.fraction, cfg.split.seed).map_err(input)?;
    let (learning, warn_l) = prepare_bags(&learn, &cfg.metric);
    let (validation, warn_v) = prepare_bags(&val, &cfg.metric);
    for w in warn_l.iter().chain(&warn_v) {
        eprintln!("warning: {w}");
    }
    Ok(SplitBags {
        learning,
        validation,
    })
}

fn phase_err(e: TrainError) -> CliError {
    runtime(e)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(g) = args.group_size {
        cfg.train.group_size = g;
    }
    let target = load_and_split(&cfg, &args.dataset)?;
    let pretrain = match (&args.pretrain_dataset, cfg.train.switches.pretrain) {
        (Some(p), true) => Some(load_and_split(&cfg, p)?),
        (None, true) => {
            return Err(CliError::Input(
                "the pretrain switch is on but no --pretrain-dataset was given".into(),
            ))
        }
        _ => None,
    };

    let mut net = cfg.network.clone();
    if !cfg.train.switches.relu6 {
        net.activation_clip = None;
    }

    // Train the seed group; keep the best by (validation errors, loss).
    let mut best: Option<(u64, PhaseResult)> = None;
    for i in 0..cfg.train.group_size as u64 {
        let seed = mix_seed(cfg.train.seed, i);
        let mut seed_cfg = cfg.train.clone();
        seed_cfg.seed = seed;
        let mut params = init_params(&net, seed).map_err(runtime)?;
        if let Some(pre) = &pretrain {
            let phase = train_phase(
                params,
                &pre.learning,
                &pre.validation,
                &seed_cfg,
                ForwardMode::Float,
            )
            .map_err(phase_err)?;
            params = phase.best;
        }
        let phase = train_phase(
            params,
            &target.learning,
            &target.validation,
            &seed_cfg,
            ForwardMode::Float,
        )
        .map_err(phase_err)?;
        println!(
            "seed {i}: validation errors {}, loss {:.6}",
            phase.best_val_errors, phase.best_val_loss
        );
        let better = match &best {
            None => true,
            Some((_, b)) => {
                (phase.best_val_errors, phase.best_val_loss)
                    < (b.best_val_errors, b.best_val_loss)
            }
        };
        if better {
            best = Some((i, phase));
        }
    }
    let (winner, phase) = best.expect("group_size >= 1");
    println!(
        "best member: seed {winner} with {} validation errors",
        phase.best_val_errors
    );
    if let Some(history) = &args.history {
        write_history_csv(history, &phase.history).map_err(runtime)?;
    }
    save_model(
        &ModelFile {
            params: phase.best,
            quant: None,
        },
        &args.out,
    )
    .map_err(runtime)?;
    write_resolved_config(&cfg, &args.out).map_err(runtime)?;
    println!("wrote float model to {}", args.out.display());
    Ok(())
}

fn cmd_quantize(args: QuantizeArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let file = load_model(&args.model).map_err(input)?;
    let target = load_and_split(&cfg, &args.dataset)?;

    let calibration: Vec<Vec<f64>> = target
        .learning
        .iter()
        .flat_map(|b| b.slices.iter().cloned())
        .collect();
    let sim = calibrate_activation_ranges(&file.params, &calibration, QuantConfig::default())
        .map_err(runtime)?;
    let qat = train_phase(
        file.params,
        &target.learning,
        &target.validation,
        &cfg.train,
        ForwardMode::FakeQuant(&sim),
    )
    .map_err(phase_err)?;
    let quantized = quantize_with_ranges(&qat.best, &sim).map_err(runtime)?;
    println!(
        "quantization-aware phase: validation errors {}, loss {:.6}",
        qat.best_val_errors, qat.best_val_loss
    );
    save_model(
        &ModelFile {
            params: qat.best,
            quant: Some(quantized),
        },
        &args.out,
    )
    .map_err(runtime)?;
    write_resolved_config(&cfg, &args.out).map_err(runtime)?;
    println!("wrote quantized model to {}", args.out.display());
    Ok(())
}

fn print_report(report: &CountReport, names: &[String]) {
    for cat in 1..report.n_categories {
        let totals = report.reported_totals();
        let (est, truth) = totals[cat - 1];
        match report.error_rate_for(cat) {
            Some(e) => println!(
                "{:<12} E = {:6.2}%   counted {est}/{truth}",
                names[cat],
                e * 100.0
            ),
            None => println!("{:<12} (no true events)   counted {est}/{truth}", names[cat]),
        }
    }
    match report.error_rate() {
        Ok(e) => println!("{:<12} E = {:6.2}%", "total", e * 100.0),
        Err(_) => println!("{:<12} undefined (no true events)", "total"),
    }
    println!(
        "{:<12} {}/{} recordings",
        "non-shot only (false positives)",
        report.false_positives(),
        report.non_shot_recordings()
    );
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let file = load_model(&args.model).map_err(input)?;
    let dataset = load_dataset(&args.dataset).map_err(input)?;
    let names = dataset.category_names.clone();
    let full;
    let learning_for_baseline;
    let eval_set: &Dataset = match args.split.as_str() {
        "none" => {
            learning_for_baseline = None;
            full = dataset;
            &full
        }
        side => {
            let (learn, val) =
                split_dataset(dataset, cfg.split.fraction, cfg.split.seed).map_err(input)?;
            if side == "learning" {
                learning_for_baseline = Some(val);
                full = learn;
            } else {
                learning_for_baseline = Some(learn);
                full = val;
            }
            &full
        }
    };

    let t_m = cfg.train.min_event_duration_ms;
    let post = cfg.train.switches.post_filter;
    let report = if args.quantized {
        let qm = file.quant.as_ref().ok_or_else(|| {
            CliError::Input("model file has no quantized block; run `quantize` first".into())
        })?;
        let mut scratch = QScratch::for_model(qm);
        count_dataset(eval_set, &cfg.metric, t_m, post, |x| {
            qforward(qm, x, &mut scratch)
        })
    } else {
        count_dataset(eval_set, &cfg.metric, t_m, post, |x| {
            forward(&file.params, x).expect("slice length matches config")
        })
    };
    print_report(&report, &names);

    if args.baselines {
        if let Some(learning) = &learning_for_baseline {
            let rates =
                baseline_weighted_random(learning, eval_set, &cfg.metric, cfg.train.seed, 100)
                    .map_err(runtime)?;
            let mean = rates.iter().sum::<f64>() / rates.len() as f64;
            let sd = (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>()
                / rates.len() as f64)
                .sqrt();
            println!(
                "weighted-random baseline: E = {:.1}% ± {:.1}% (100 repetitions)",
                mean * 100.0,
                sd * 100.0
            );
        } else {
            eprintln!("note: --baselines needs --split to know the learning set; skipped");
        }
    }

    if let Some(path) = &args.report_csv {
        write_report_csv(path, &report).map_err(runtime)?;
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config)?;
    let target = load_and_split(&cfg, &args.dataset)?;
    let pretrain = load_and_split(&cfg, &args.pretrain_dataset)?;
    std::fs::create_dir_all(&args.out_dir).map_err(runtime)?;

    let inputs = AblationInputs {
        learning: &target.learning,
        validation: &target.validation,
        pretrain_learning: &pretrain.learning,
        pretrain_validation: &pretrain.validation,
        network: &cfg.network,
    };
    let report = ablation_report(&inputs, &cfg.train, args.seeds).map_err(phase_err)?;
    println!("{:<22} {:>8} {:>8} {:>8}", "rung", "q1", "median", "q3");
    for rung in &report.rungs {
        let q = rung.quantiles();
        println!(
            "{:<22} {:>7.1}% {:>7.1}% {:>7.1}%",
            rung.name,
            q[1] * 100.0,
            q[2] * 100.0,
            q[3] * 100.0
        );
    }
    write_ablation_csv(&args.out_dir.join("ablation.csv"), &report).map_err(runtime)?;
    write_ablation_quantiles(&args.out_dir.join("ablation_quantiles.csv"), &report)
        .map_err(runtime)?;
    write_resolved_config(&cfg, &args.out_dir.join("ablation.csv")).map_err(runtime)?;
    println!("wrote report tables to {}", args.out_dir.display());
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<(), CliError> {
    let file = load_model(&args.model).map_err(input)?;
    let qm = file.quant.ok_or_else(|| {
        CliError::Input("model file has no quantized block; run `quantize` first".into())
    })?;
    let (rate, samples) = read_stream(&args.stream).map_err(input)?;
    let metric = {
        // The replay needs slice geometry; reuse the run config written next
        // to the model when present, else defaults for the model's input.
        let sibling = args.model.with_file_name(format!(
            "{}.config.toml",
            args.model.file_name().unwrap_or_default().to_string_lossy()
        ));
        if sibling.exists() {
            load_config(&sibling)?.metric
        } else {
            let mut m = crate::preprocess::MetricConfig::for_sample_rate(rate);
            m.input_len = qm.config.input_len;
            m.pre_trigger = m.window.min(m.input_len - 1);
            m
        }
    };
    let mut detector = Detector::new(metric, qm, rate, args.min_event_duration_ms)
        .map_err(input)?;
    for &a in &samples {
        let step = detector.push_sample(a);
        if let Some(ev) = step.detection {
            println!("{:.6}\t{}", ev.t_seconds, ev.category);
        }
    }
    let (tail, report) = detector.finish();
    for ev in tail {
        println!("{:.6}\t{}", ev.t_seconds, ev.category);
    }
    println!("# counts: {:?}", report.counts);
    println!(
        "# triggers {}  inferences {}  suppressed {}  memory {} bytes",
        report.triggers, report.inferences, report.suppressed, report.memory_bytes
    );
    Ok(())
}

fn cmd_stream(args: StreamArgs) -> Result<(), CliError> {
    let dataset = load_dataset(&args.dataset).map_err(input)?;
    let rec = dataset
        .records
        .iter()
        .find(|r| r.series.series_id == args.series)
        .ok_or_else(|| {
            CliError::Input(format!("no recording named {:?} in the dataset", args.series))
        })?;
    write_stream(&args.out, rec.series.sample_rate_hz, &rec.series.samples).map_err(runtime)?;
    println!(
        "wrote {} samples at {} Hz to {}",
        rec.series.samples.len(),
        rec.series.sample_rate_hz,
        args.out.display()
    );
    Ok(())
}
