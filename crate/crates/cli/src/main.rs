//! `actseg`: train, run, and inspect the windowed-attention segmentation
//! model from the command line.
//!
//! Exit codes: 0 success, 2 configuration/usage problems, 3 dimension
//! mismatches, 4 malformed or inconsistent data, 1 internal errors.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable config, missing files: exit 2.
    Config(String),
    /// Shapes that should agree but do not: exit 3.
    Dimension(String),
    /// Files that parse but carry inconsistent content: exit 4.
    Data(String),
    /// Bugs and broken invariants: exit 1.
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dimension(_) => 3,
            CliError::Data(_) => 4,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m)
            | CliError::Dimension(m)
            | CliError::Data(m)
            | CliError::Internal(m) => f.write_str(m),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "actseg", version, about = "Temporal action segmentation toolkit")]
struct Cli {
    /// JSON run configuration; command-line flags override its fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for weight init, shuffling, dropout, and data synthesis
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory that receives all output files
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset manifest
    Train(TrainArgs),
    /// Predict per-frame labels for one feature file
    Predict(PredictArgs),
    /// Score predicted label files against ground truth
    Eval(EvalArgs),
    /// Count materialized attention scores against the closed form
    BenchAttn(BenchAttnArgs),
    /// Export one frame's attention weights from every encoder block
    DumpAttn(DumpAttnArgs),
    /// Generate a synthetic labelled dataset
    GenSynth(GenSynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest (JSON array of {features, labels})
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Class map file
    #[arg(long)]
    classes: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    num_blocks: Option<usize>,
    #[arg(long)]
    num_decoders: Option<usize>,
    #[arg(long)]
    model_dim: Option<usize>,
    #[arg(long)]
    input_dropout: Option<f64>,
    #[arg(long)]
    alpha_decay: Option<f64>,
    /// Smoothing-loss weight
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature file (binary or plain text)
    #[arg(long)]
    features: PathBuf,
    /// Class map file
    #[arg(long)]
    classes: PathBuf,
    /// Also write each refinement stage's prediction
    #[arg(long)]
    all_stages: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted label file; repeat for several videos
    #[arg(long = "pred", required = true)]
    preds: Vec<PathBuf>,
    /// Ground-truth label file, paired with --pred by position
    #[arg(long = "gt", required = true)]
    gts: Vec<PathBuf>,
    /// Class map file
    #[arg(long)]
    classes: PathBuf,
}

#[derive(Args)]
struct BenchAttnArgs {
    /// Sequence length T
    #[arg(long, default_value_t = 5000)]
    frames: usize,
    /// Encoder depth J
    #[arg(long, default_value_t = 9)]
    blocks: usize,
    /// Feature width used for the instrumented forward pass
    #[arg(long, default_value_t = 8)]
    model_dim: usize,
}

#[derive(Args)]
struct DumpAttnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Anchor frame whose attention row is exported
    #[arg(long)]
    frame: usize,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 5)]
    num_classes: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 20)]
    sequences: usize,
    #[arg(long, default_value_t = 200)]
    min_frames: usize,
    #[arg(long, default_value_t = 400)]
    max_frames: usize,
    /// Shortest sampled segment, in frames
    #[arg(long, default_value_t = 8)]
    min_len: usize,
    /// Longest sampled segment, in frames
    #[arg(long, default_value_t = 32)]
    max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    mean_scale: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = config::FileConfig::load(cli.config.as_deref())?;
    let ctx = commands::Context {
        file,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::Train(args) => commands::train(&ctx, &args),
        Command::Predict(args) => commands::predict(&ctx, &args),
        Command::Eval(args) => commands::eval(&ctx, &args),
        Command::BenchAttn(args) => commands::bench_attn(&ctx, &args),
        Command::DumpAttn(args) => commands::dump_attn(&ctx, &args),
        Command::GenSynth(args) => commands::gen_synth(&ctx, &args),
    }
}
