use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cimnas_core::analysis::OutputDomain;
use cimnas_core::eval::Statistic;
use cimnas_core::manifest::{manifest_path_for, ArtifactHash, RunManifest};
use cimnas_core::noise::NoiseSpec;

mod commands;
mod datasets;

use datasets::DataArgs;

#[derive(Parser, Debug)]
#[command(
    name = "cimnas",
    version,
    about = "Weight-noise robustness analysis, noise-aware training and architecture search"
)]
struct Cli {
    /// Master seed; every other seed is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory holding `mnist/` and `cifar10/` (or the dataset files directly).
    #[arg(long, global = true, default_value = "data")]
    data_dir: PathBuf,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model, optionally with weight-noise injection.
    Train(TrainArgs),
    /// Monte-Carlo study of output changes on one input, with Gaussian fits.
    Analyze(AnalyzeArgs),
    /// Accuracy distribution over K weight-noise samples.
    Eval(EvalArgs),
    /// Architecture search rewarded by a noisy-accuracy statistic.
    Search(SearchArgs),
    /// Summarize eval, analysis and search result files.
    Report(ReportArgs),
    /// Re-run a command from its manifest and compare output hashes.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    /// Flatten, one hidden layer, logits.
    Mlp,
    /// Two 3x3 convolutions and a linear classifier.
    Cnn,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ActivationArg {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum DomainArg {
    Logits,
    Probabilities,
}

impl From<DomainArg> for OutputDomain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Logits => OutputDomain::Logits,
            DomainArg::Probabilities => OutputDomain::Probabilities,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum StatisticArg {
    Mean,
    P95min,
    Max,
}

impl From<StatisticArg> for Statistic {
    fn from(s: StatisticArg) -> Self {
        match s {
            StatisticArg::Mean => Statistic::Mean,
            StatisticArg::P95min => Statistic::P95Min,
            StatisticArg::Max => Statistic::Max,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SpacePreset {
    Standard,
    Micro,
}

/// Weight-noise distribution. `--variance` is an alternative to `--sigma`.
#[derive(Args, Clone, Debug, Serialize)]
struct NoiseArgs {
    /// Noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Noise variance (instead of --sigma).
    #[arg(long, conflicts_with = "sigma")]
    variance: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    mu: f64,
}

impl NoiseArgs {
    fn spec(&self, default_sigma: f64, seed: u64) -> Result<NoiseSpec> {
        Ok(match self.variance {
            Some(v) => NoiseSpec::from_variance(self.mu, v, seed)?,
            None => NoiseSpec::new(self.mu, self.sigma.unwrap_or(default_sigma), seed)?,
        })
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Architecture JSON (for example the best architecture of a search).
    #[arg(long, conflicts_with = "preset")]
    arch: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Mlp)]
    preset: Preset,
    /// Hidden units of the MLP preset or channels of the CNN preset.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    activation: ActivationArg,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    /// Training noise (default sigma 0: plain SGD).
    #[command(flatten)]
    noise: NoiseArgs,
    /// Train quantized layers at full precision (quantization still applies at deployment).
    #[arg(long)]
    no_quantize: bool,
    /// Checkpoint path; the architecture and training log are written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct AnalyzeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Test-set index of the input to perturb.
    #[arg(long, default_value_t = 0)]
    input_index: usize,
    #[arg(long, short = 'k', default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 100)]
    bins: usize,
    /// Noise (default sigma 0.04).
    #[command(flatten)]
    noise: NoiseArgs,
    #[arg(long, value_enum, default_value_t = DomainArg::Logits)]
    domain: DomainArg,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-element histogram tables (TSV) here.
    #[arg(long)]
    histograms: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, short = 'k', default_value_t = 100)]
    samples: usize,
    /// Noise (default sigma 0.04).
    #[command(flatten)]
    noise: NoiseArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct SearchArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Search-space JSON; overrides --space-preset.
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SpacePreset::Standard)]
    space_preset: SpacePreset,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    child_epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    /// Noise samples per child evaluation.
    #[arg(long, short = 'k', default_value_t = 5)]
    samples: usize,
    #[arg(long, value_enum, default_value_t = StatisticArg::Mean)]
    statistic: StatisticArg,
    /// Noise for child training and evaluation (default sigma 0.04).
    #[command(flatten)]
    noise: NoiseArgs,
    /// Stop after this many identical consecutive samples.
    #[arg(long, default_value_t = cimnas_core::nas::DEFAULT_REPEAT_LIMIT)]
    repeat_limit: usize,
    /// Sample architectures uniformly instead of from the controller.
    #[arg(long)]
    random: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    /// Eval JSON, analysis JSON or search history files.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Write the rendered tables here (and a manifest beside it).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the tables as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ReplayArgs {
    manifest: PathBuf,
}

/// What a command read and wrote, for its manifest.
struct RunRecord {
    primary: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    volatile: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
    noise: Option<NoiseSpec>,
    resolved: serde_json::Value,
}

#[derive(Debug)]
struct ReplayMismatch(String);

impl std::fmt::Display for ReplayMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ReplayMismatch {}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Train(_) => "train",
        Command::Analyze(_) => "analyze",
        Command::Eval(_) => "eval",
        Command::Search(_) => "search",
        Command::Report(_) => "report",
        Command::Replay(_) => "replay",
    }
}

fn run(args: Vec<String>) -> Result<()> {
    let cli = Cli::try_parse_from(std::iter::once("cimnas".to_string()).chain(args.iter().cloned()))?;
    let start = Instant::now();
    let name = command_name(&cli.command);
    let record = match &cli.command {
        Command::Train(a) => Some(commands::train(&cli, a)?),
        Command::Analyze(a) => Some(commands::analyze(&cli, a)?),
        Command::Eval(a) => Some(commands::eval(&cli, a)?),
        Command::Search(a) => Some(commands::search(&cli, a)?),
        Command::Report(a) => commands::report(a)?,
        Command::Replay(a) => {
            replay(a)?;
            None
        }
    };
    if let Some(r) = record {
        write_manifest(name, args, &cli, r, start.elapsed().as_secs_f64())?;
    }
    Ok(())
}

fn write_manifest(command: &str, args: Vec<String>, cli: &Cli, r: RunRecord, wall_time_s: f64) -> Result<()> {
    let hash_all = |paths: &[PathBuf]| {
        paths
            .iter()
            .map(|p| ArtifactHash::of(p))
            .collect::<cimnas_core::Result<Vec<_>>>()
    };
    let mut seeds = r.seeds;
    seeds.insert("master".into(), cli.seed);
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        args,
        cwd: std::env::current_dir()?.display().to_string(),
        resolved: serde_json::json!({
            "seed": cli.seed,
            "data_dir": cli.data_dir,
            "command": r.resolved,
        }),
        seeds,
        noise: r.noise,
        inputs: hash_all(&r.inputs)?,
        outputs: hash_all(&r.outputs)?,
        volatile_outputs: r.volatile.iter().map(|p| p.display().to_string()).collect(),
        wall_time_s,
    };
    let path = manifest_path_for(&r.primary);
    manifest.save(&path)?;
    log::info!("manifest written to {}", path.display());
    Ok(())
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let manifest = RunManifest::load(&a.manifest)?;
    if manifest.command == "replay" {
        anyhow::bail!(ReplayMismatch("cannot replay a replay".into()));
    }
    std::env::set_current_dir(&manifest.cwd).with_context(|| format!("entering {}", manifest.cwd))?;
    run(manifest.args.clone())?;
    let mismatches = manifest.verify_outputs();
    for out in &manifest.outputs {
        let status = if mismatches.iter().any(|m| m.path == out.path) {
            "MISMATCH"
        } else {
            "ok"
        };
        println!("{status} {} {}", out.sha256, out.path);
    }
    if !mismatches.is_empty() {
        anyhow::bail!(ReplayMismatch(format!(
            "{} of {} outputs differ from the manifest",
            mismatches.len(),
            manifest.outputs.len()
        )));
    }
    println!("replay reproduced all {} outputs", manifest.outputs.len());
    Ok(())
}

fn category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<cimnas_core::Error>() {
            return e.category();
        }
        if cause.is::<ReplayMismatch>() {
            return "replay";
        }
        if cause.is::<clap::Error>() {
            return "usage";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
    }
    "internal"
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let verbose = args.iter().any(|a| a == "-v" || a == "--verbose");
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if verbose { "info" } else { "warn" }))
        .init();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(e) = err.downcast_ref::<clap::Error>() {
                if matches!(
                    e.kind(),
                    clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
                ) {
                    let _ = e.print();
                    return ExitCode::SUCCESS;
                }
                let text = e.to_string();
                let first: Vec<&str> = text
                    .lines()
                    .take_while(|l| !l.trim().is_empty())
                    .map(str::trim)
                    .collect();
                let line = first.join(" ");
                eprintln!("error: usage: {}", line.trim_start_matches("error: "));
                return ExitCode::from(2);
            }
            let mut msg = String::new();
            for cause in err.chain() {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&text);
                }
            }
            let msg = msg.replace('\n', " ");
            eprintln!("error: {}: {msg}", category(&err));
            ExitCode::FAILURE
        }
    }
}
