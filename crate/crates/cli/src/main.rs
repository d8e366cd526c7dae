mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use config::{FileConfig, Flags, Settings};

/// Detect failures to link an entity's image to what the model knows
/// about it, from recorded hidden-state traces.
#[derive(Debug, Parser)]
#[command(name = "groundprobe", version)]
struct Cli {
    /// TOML file with defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice (else GROUNDPROBE_SEED, else a fixed default).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for outputs (default: current directory).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build QA datasets.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Grade model responses against gold answers.
    Grade(GradeArgs),
    /// Layerwise target-token probability and cosine trajectories.
    Lens(LensArgs),
    /// Train or evaluate a linking-failure probe.
    #[command(subcommand)]
    Probe(ProbeCmd),
    /// Answer/abstain decisions with coverage and risk.
    Select(SelectArgs),
    /// Generate synthetic traces.
    Synth(SynthArgs),
    /// Fit on training traces, evaluate on a held-out trace.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
enum BenchCmd {
    /// Run the extraction and filter pipeline, answering LM calls from a
    /// transcript.
    Build(BenchBuildArgs),
    /// Generate digit arithmetic questions.
    Mnist(BenchMnistArgs),
}

#[derive(Debug, Args)]
struct BenchBuildArgs {
    /// One entity per line.
    #[arg(long)]
    entities: PathBuf,
    /// JSON lines with `entity`, `text` and optional `images`, `category`.
    #[arg(long)]
    articles: PathBuf,
    /// JSON lines with `entity`, `question`, `answer`.
    #[arg(long)]
    direct: Option<PathBuf>,
    /// JSON lines of logged LM calls.
    #[arg(long)]
    transcript: PathBuf,
    #[arg(long, default_value = groundprobe::bench::DEFAULT_CATEGORY_NOUN)]
    category_noun: String,
    #[arg(long, default_value_t = 5)]
    images_per_pair: usize,
}

#[derive(Debug, Args)]
struct BenchMnistArgs {
    #[arg(long, default_value_t = 1000)]
    count: usize,
}

#[derive(Debug, Args)]
struct GradeArgs {
    /// CSV with `datapoint_id,response,answer`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    case_sensitive: bool,
}

#[derive(Debug, Args)]
struct LensArgs {
    /// Visual-setting trace.
    #[arg(long, alias = "visual")]
    trace: PathBuf,
    #[arg(long)]
    fullinfo: Option<PathBuf>,
    #[arg(long)]
    unembedding: Option<PathBuf>,
    /// JSON final-norm parameters applied before unembedding.
    #[arg(long)]
    final_norm: Option<PathBuf>,
    /// JSON object mapping datapoint id to target token id.
    #[arg(long)]
    gold: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum ProbeCmd {
    Train(ProbeTrainArgs),
    Eval(ProbeEvalArgs),
}

#[derive(Debug, Args)]
struct ProbeTrainArgs {
    #[arg(long, alias = "visual")]
    trace: PathBuf,
    #[arg(long)]
    layer: Option<usize>,
    /// Fraction of each class used for training; the rest is evaluated.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Debug, Args)]
struct ProbeEvalArgs {
    #[arg(long)]
    probe: PathBuf,
    #[arg(long, alias = "visual")]
    trace: PathBuf,
    /// Defaults to threshold.json next to the probe.
    #[arg(long)]
    perplexity_threshold: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long)]
    probe: PathBuf,
    #[arg(long, alias = "visual")]
    trace: PathBuf,
    /// Defaults to threshold.json next to the probe.
    #[arg(long)]
    perplexity_threshold: Option<PathBuf>,
    /// Abstain when the failure score is above this.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Write three training sets and one held-out set with different noise.
    #[arg(long)]
    ood: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Training trace; repeat for each dataset.
    #[arg(long = "train", required_unless_present = "synthetic")]
    train: Vec<PathBuf>,
    #[arg(long, required_unless_present = "synthetic")]
    heldout: Option<PathBuf>,
    /// Generate the four datasets instead of reading them.
    #[arg(long, conflicts_with_all = ["train", "heldout"])]
    synthetic: bool,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
}

/// Invalid invocation discovered after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let settings = Settings::resolve(
        Flags {
            seed: cli.seed,
            out_dir: cli.out_dir,
            threads: cli.threads,
            format: cli.format,
        },
        file,
    )?;
    if let Some(n) = settings.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Bench(BenchCmd::Build(a)) => commands::bench_build(&settings, a),
        Command::Bench(BenchCmd::Mnist(a)) => commands::bench_mnist(&settings, a),
        Command::Grade(a) => commands::grade(&settings, a),
        Command::Lens(a) => commands::lens(&settings, a),
        Command::Probe(ProbeCmd::Train(a)) => commands::probe_train(&settings, a),
        Command::Probe(ProbeCmd::Eval(a)) => commands::probe_eval(&settings, a),
        Command::Select(a) => commands::select(&settings, a),
        Command::Synth(a) => commands::synth(&settings, a),
        Command::Report(a) => commands::report(&settings, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
