//! Command-line pipeline: generate data, initialize a model, calibrate, run the
//! layer-wise sensitivity sweep, select a mixed-precision config, and evaluate it.
//!
//! Every command is deterministic for fixed inputs and seeds: rerunning overwrites
//! outputs with bit-identical bytes. No command mutates its input files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use qsv_core::calib::{run_calibration, CalibStats, Observer};
use qsv_core::data::{build_trials, generate, load_features, save_features, Split};
use qsv_core::data::SpeakerDatasetSpec;
use qsv_core::eval::{load_trials, save_trials};
use qsv_core::model::{init_model, LayerName, ModelConfig, QuantConfig};
use qsv_core::model_io::{load_model, save_model};
use qsv_core::report::{
    self, ConfigReport, Report, SchemeInfo, SizedEer, CONFIG_FORMAT, GENERATED_BY,
};
use qsv_core::sensitivity::{evaluate_config, select, sweep, SelectionPolicy, SensitivityReport};

#[derive(Parser)]
#[command(
    name = "qsv",
    version,
    about = "Int8 post-training quantization analysis for a compact speaker-verification model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic calibration/evaluation corpus and a trial list
    GenData(GenDataArgs),
    /// Initialize a deterministic model file
    InitModel(InitModelArgs),
    /// Collect per-layer calibration statistics into a text file
    Calibrate(CalibrateArgs),
    /// Quantize one layer at a time and report EER and size per layer
    Sweep(SweepArgs),
    /// Apply a selection policy to a sweep report, producing a quant config
    Select(SelectArgs),
    /// Evaluate one quant config against the float baseline
    Eval(EvalArgs),
    /// Render a stored report as csv, markdown or json-like text
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset root (creates calib/, eval/ and trials.txt)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    /// Evaluation utterances per speaker
    #[arg(long, default_value_t = 10)]
    utts: usize,
    /// Calibration utterances per speaker
    #[arg(long, default_value_t = 2)]
    calib_utts: usize,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 16)]
    feat_dim: usize,
    /// Per-dim scale of speaker mean vectors
    #[arg(long, default_value_t = 1.0)]
    sigma_s: f32,
    /// Per-frame noise scale
    #[arg(long, default_value_t = 0.3)]
    sigma_n: f32,
    /// Moving-average window over time
    #[arg(long, default_value_t = 5)]
    smooth: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    targets: usize,
    #[arg(long, default_value_t = 500)]
    nontargets: usize,
}

#[derive(Args)]
struct InitModelArgs {
    /// Output model file
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    feat_dim: usize,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    res2_scale: usize,
    #[arg(long, default_value_t = 3)]
    kernel_size: usize,
    /// Comma-separated dilations of the three blocks
    #[arg(long, default_value = "2,3,4")]
    dilations: String,
    #[arg(long, default_value_t = 16)]
    se_bottleneck: usize,
    #[arg(long, default_value_t = 16)]
    attn_bottleneck: usize,
    #[arg(long, default_value_t = 384)]
    mfa_channels: usize,
    #[arg(long, default_value_t = 8)]
    emb_dim: usize,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset root (uses <features>/calib)
    #[arg(long)]
    features: PathBuf,
    /// minmax or percentile:<p>
    #[arg(long, default_value = "minmax")]
    observer: String,
    /// Output statistics file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset root (uses <features>/calib and <features>/eval)
    #[arg(long)]
    features: PathBuf,
    /// Trial list file (defaults to <features>/trials.txt)
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long, default_value = "minmax")]
    observer: String,
    /// Worker threads for the per-layer rows
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output report file (json-like)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    /// Sweep report file
    #[arg(long)]
    report: PathBuf,
    /// threshold:<t> | topk:<k> | budget:<e>  (EER deltas in percentage points)
    #[arg(long, default_value = "threshold:0.05")]
    policy: String,
    /// Optional quant-config output file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Quant config file from `select`; omit for all seven layers
    #[arg(long)]
    qconfig: Option<PathBuf>,
    #[arg(long, default_value = "minmax")]
    observer: String,
    /// Output report file (json-like)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Stored report file
    #[arg(long = "in")]
    input: PathBuf,
    /// csv, md or json-like
    #[arg(long, default_value = "md")]
    format: String,
    /// Write here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_observer(s: &str) -> Result<Observer> {
    let (kind, arg) = split_spec(s);
    match kind {
        "minmax" => {
            if arg.is_some() {
                bail!("observer 'minmax' takes no argument");
            }
            Ok(Observer::MinMax)
        }
        "percentile" => {
            let p: f64 = arg
                .context("--observer percentile needs a fraction, e.g. percentile:0.99")?
                .parse()
                .context("--observer percentile fraction must be a number")?;
            Ok(Observer::percentile(p)?)
        }
        other => bail!("unknown observer '{other}' (expected minmax or percentile:<p>)"),
    }
}

fn parse_policy(s: &str) -> Result<SelectionPolicy> {
    let (kind, arg) = split_spec(s);
    let arg = arg.with_context(|| format!("--policy {kind} needs a value, e.g. {kind}:0.05"))?;
    let policy = match kind {
        "threshold" => SelectionPolicy::Threshold {
            tau: arg.parse().context("--policy threshold value must be a number")?,
        },
        "topk" => SelectionPolicy::TopKExclude {
            k: arg.parse().context("--policy topk value must be an integer")?,
        },
        "budget" => SelectionPolicy::Budget {
            epsilon: arg.parse().context("--policy budget value must be a number")?,
        },
        other => bail!("unknown policy '{other}' (expected threshold, topk or budget)"),
    };
    policy.validate()?;
    Ok(policy)
}

/// Accept both `name:value` and `name=value`.
fn split_spec(s: &str) -> (&str, Option<&str>) {
    match s.split_once([':', '=']) {
        Some((k, v)) => (k, Some(v)),
        None => (s, None),
    }
}

fn trials_path(features: &Path, flag: &Option<PathBuf>) -> PathBuf {
    flag.clone().unwrap_or_else(|| features.join("trials.txt"))
}

fn write_out(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let eval_spec = SpeakerDatasetSpec {
        n_speakers: args.speakers,
        utts_per_speaker: args.utts,
        frames: args.frames,
        feat_dim: args.feat_dim,
        inter_speaker_spread: args.sigma_s,
        intra_speaker_noise: args.sigma_n,
        smoothing_window: args.smooth,
        seed: args.seed,
    };
    // disjoint calibration split: same distribution, distinct seed
    let calib_spec = SpeakerDatasetSpec {
        utts_per_speaker: args.calib_utts,
        seed: args.seed + 1,
        ..eval_spec.clone()
    };
    let eval_fs = generate(&eval_spec, Split::Evaluation)?;
    let calib_fs = generate(&calib_spec, Split::Calibration)?;
    save_features(&eval_fs, args.out.join("eval"))?;
    save_features(&calib_fs, args.out.join("calib"))?;
    let trials = build_trials(&eval_fs, args.targets, args.nontargets, args.seed)?;
    save_trials(&trials, args.out.join("trials.txt"))?;
    println!(
        "wrote {} eval + {} calib utterances and {} trials under {}",
        eval_fs.len(),
        calib_fs.len(),
        trials.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_init_model(args: InitModelArgs) -> Result<()> {
    let dil: Vec<usize> = args
        .dilations
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .context("--dilations must be three comma-separated integers")?;
    if dil.len() != 3 {
        bail!("--dilations must list exactly three values, got {}", dil.len());
    }
    let config = ModelConfig {
        feat_dim: args.feat_dim,
        channels: args.channels,
        res2_scale: args.res2_scale,
        dilations: [dil[0], dil[1], dil[2]],
        kernel_size: args.kernel_size,
        se_bottleneck: args.se_bottleneck,
        attn_bottleneck: args.attn_bottleneck,
        mfa_channels: args.mfa_channels,
        emb_dim: args.emb_dim,
        seed: args.seed,
    };
    let weights = init_model(&config)?;
    save_model(&args.out, &config, &weights, &QuantConfig::default())?;
    println!(
        "wrote model with {} params ({} tensors) to {}",
        weights.total_params(),
        weights.tensors().count(),
        args.out.display()
    );
    Ok(())
}

fn stats_line(stats: &CalibStats, range: Option<(f64, f64)>) -> String {
    let (min, max) = stats.min_max().unwrap_or((f64::NAN, f64::NAN));
    let mut line = format!(
        "{} count={} min={} max={} mean={} std={}",
        stats.name(),
        stats.count(),
        min,
        max,
        stats.mean(),
        stats.std()
    );
    if let Some((alpha, beta)) = range {
        line.push_str(&format!(" alpha={alpha} beta={beta}"));
    }
    line.push('\n');
    line
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let observer = parse_observer(&args.observer)?;
    let (config, weights) = load_model(&args.model)?;
    let calib = load_features(args.features.join("calib"), Split::Calibration)?;
    let out = run_calibration(&config, &weights, &calib, &LayerName::ALL, observer)?;
    let ranges = out.ranges()?;
    let mut text = format!(
        "# qsv calibration stats v1 observer={} utterances={}\n# <name> count min max mean std [alpha beta]\n",
        out.observer, out.utterances
    );
    for (layer, stats) in &out.activations {
        text.push_str(&stats_line(stats, Some(ranges[layer])));
    }
    for stats in out.weights.values() {
        text.push_str(&stats_line(stats, None));
    }
    write_out(&args.out, &text)?;
    println!(
        "calibrated {} activation sites and {} weight tensors over {} utterances -> {}",
        out.activations.len(),
        out.weights.len(),
        out.utterances,
        args.out.display()
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let observer = parse_observer(&args.observer)?;
    let (config, weights) = load_model(&args.model)?;
    let calib = load_features(args.features.join("calib"), Split::Calibration)?;
    let eval_fs = load_features(args.features.join("eval"), Split::Evaluation)?;
    let trials = load_trials(trials_path(&args.features, &args.trials))?;
    let report = sweep(
        &config, &weights, &calib, &eval_fs, &trials, observer, args.jobs,
    )?;
    let file_form = Report::Sweep(report.to_file_form());
    write_out(&args.out, &report::to_json(&file_form))?;
    print!("{}", report::to_markdown(&file_form));
    println!("wrote sweep report to {}", args.out.display());
    Ok(())
}

fn load_sweep_report(path: &Path) -> Result<SensitivityReport> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match report::parse_report(&text, path)? {
        Report::Sweep(sweep) => Ok(SensitivityReport::from_file_form(&sweep)?),
        Report::Config(_) => bail!(
            "{} is a config report; select needs a sweep report",
            path.display()
        ),
    }
}

fn cmd_select(args: SelectArgs) -> Result<()> {
    let policy = parse_policy(&args.policy)?;
    let report = load_sweep_report(&args.report)?;
    let qconfig = select(&report, &policy)?;
    let quantized: Vec<&str> = qconfig.layers.iter().map(|l| l.as_str()).collect();
    let excluded: Vec<&str> = LayerName::ALL
        .iter()
        .filter(|l| !qconfig.contains(**l))
        .map(|l| l.as_str())
        .collect();
    println!("policy: {policy}");
    println!("quantize: {}", quantized.join(", "));
    println!("exclude: {}", excluded.join(", "));
    if let Some(out) = &args.out {
        write_out(out, &report::quant_config_to_text(&qconfig))?;
        println!("wrote quant config to {}", out.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let observer = parse_observer(&args.observer)?;
    let (config, weights) = load_model(&args.model)?;
    let calib = load_features(args.features.join("calib"), Split::Calibration)?;
    let eval_fs = load_features(args.features.join("eval"), Split::Evaluation)?;
    let trials = load_trials(trials_path(&args.features, &args.trials))?;
    let qconfig = match &args.qconfig {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            report::quant_config_from_text(&text, path)?
        }
        None => QuantConfig::all(),
    };
    let (base_eer, base_size) = evaluate_config(
        &config,
        &weights,
        &QuantConfig::default(),
        &calib,
        &eval_fs,
        &trials,
        observer,
    )?;
    let (eer, size) = evaluate_config(
        &config, &weights, &qconfig, &calib, &eval_fs, &trials, observer,
    )?;
    let n_target = trials.iter().filter(|t| t.target).count();
    let file_form = Report::Config(ConfigReport {
        format: CONFIG_FORMAT.into(),
        generated_by: GENERATED_BY.into(),
        scheme: SchemeInfo::default(),
        observer: observer.to_string(),
        model_seed: config.seed,
        calib_dataset: format!("calib split, {} utterances", calib.len()),
        eval_dataset: format!("eval split, {} utterances", eval_fs.len()),
        n_target,
        n_nontarget: trials.len() - n_target,
        quantized_layers: qconfig.layers.iter().map(|l| l.to_string()).collect(),
        baseline: SizedEer {
            eer_pct: base_eer * 100.0,
            size_bytes: base_size,
        },
        proposed: SizedEer {
            eer_pct: eer * 100.0,
            size_bytes: size,
        },
    });
    write_out(&args.out, &report::to_json(&file_form))?;
    print!("{}", report::to_markdown(&file_form));
    println!("wrote config report to {}", args.out.display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let parsed = report::parse_report(&text, &args.input)?;
    let rendered = match args.format.as_str() {
        "csv" => report::to_csv(&parsed),
        "md" | "markdown" => report::to_markdown(&parsed),
        "json-like" | "json" => report::to_json(&parsed),
        other => bail!("unknown format '{other}' (expected csv, md or json-like)"),
    };
    match &args.out {
        Some(path) => write_out(path, &rendered)?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::InitModel(args) => cmd_init_model(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Select(args) => cmd_select(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
