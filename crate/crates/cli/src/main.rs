mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nlora_core::adapters::{NInit, NloraCore, TrainMask, Variant};
use nlora_core::trainer::OptimizerKind;
use nlora_core::Precision;

/// Nyström approximation, low-rank adapter initialisation and desk-scale training.
#[derive(Debug, Parser)]
#[command(name = "nlora", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Nyström-approximate a matrix file and report the error.
    Approx(ApproxArgs),
    /// Initialise an adapter from a base matrix and write a checkpoint.
    Init(InitArgs),
    /// Train adapters on a synthetic task.
    Train(TrainArgs),
    /// Count trainable parameters over a model layout.
    Params(ParamsArgs),
    /// Time adapter initialisation strategies.
    BenchInit(BenchArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write the resolved-config manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ApproxArgs {
    /// Input matrix (NLRA format).
    input: PathBuf,
    /// Output path for the approximation.
    output: PathBuf,
    #[arg(long)]
    rank: Option<usize>,
    /// Middle factor: pinv or raw.
    #[arg(long)]
    core: Option<NloraCore>,
    /// Sample selection: leading or random.
    #[arg(long)]
    sampling: Option<commands::SamplingArg>,
    /// Relative pseudoinverse cutoff.
    #[arg(long)]
    rank_tol: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct AdapterArgs {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    rank: Option<usize>,
    /// Defaults to the rank.
    #[arg(long)]
    alpha: Option<f64>,
    /// slora intermediate init: kaiming or gaussian.
    #[arg(long)]
    n_init: Option<NInit>,
    /// nlora intermediate init: raw-sample or pseudoinverse.
    #[arg(long)]
    nlora_core: Option<NloraCore>,
    /// Replace the base by `base − ΔW` at init (nlora).
    #[arg(long, value_name = "BOOL")]
    subtract_at_init: Option<bool>,
    /// all or intermediate-only.
    #[arg(long)]
    train_mask: Option<TrainMask>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Debug, Args)]
struct InitArgs {
    /// Base matrix (NLRA format).
    input: PathBuf,
    /// Output checkpoint.
    output: PathBuf,
    #[command(flatten)]
    adapter: AdapterArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// matrix-recovery or student-mlp.
    #[arg(long)]
    task: Option<commands::TaskKind>,
    #[command(flatten)]
    adapter: AdapterArgs,
    /// Perturbation rank of the target.
    #[arg(long)]
    k: Option<usize>,
    /// Input width.
    #[arg(long)]
    m: Option<usize>,
    /// Output width.
    #[arg(long)]
    n: Option<usize>,
    /// Hidden width (student-mlp).
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    base_std: Option<f64>,
    #[arg(long)]
    perturbation_std: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup_ratio: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// adamw or rmsprop.
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Write 0 in the wall_ms column so logs are byte-reproducible.
    #[arg(long)]
    no_wall_clock: bool,
    /// Comma-separated ranks; runs one training per rank instead of one run.
    #[arg(long, value_delimiter = ',')]
    sweep_ranks: Option<Vec<usize>>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    /// Layout file, or `llama2-7b` for the built-in one.
    #[arg(long)]
    layout: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    train_mask: Option<TrainMask>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Approx(a) => commands::approx(a),
        Command::Init(a) => commands::init(a),
        Command::Train(a) => commands::train(a),
        Command::Params(a) => commands::params(a),
        Command::BenchInit(a) => commands::bench_init(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
