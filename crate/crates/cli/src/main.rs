mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] captune::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_usage() => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "captune", version, about = "Caption vocabulary-collapse laboratory")]
struct Cli {
    /// Experiment file (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Ce,
    Rl,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Analysis {
    Histogram,
    LossSurface,
    SampleFreq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Sft,
    Wft,
    Fl,
    Afl,
    Tau,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Plain,
    Bp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecodeArg {
    Greedy,
    Beam,
    Nucleus,
    Bp,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset into <root>/data.
    GenData,
    /// Train a stage: CE pretraining, SCST, or joint SCST + CE.
    Train(TrainArgs),
    /// Classifier-only fine-tuning of a trained checkpoint (sweeps the grid by default).
    Finetune(FinetuneArgs),
    /// Decode a split to a caption file.
    Decode(DecodeArgs),
    /// Score a caption file against a split.
    Eval(EvalArgs),
    /// Emit plot data: frequency histograms or the loss surface.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: Stage,
    /// Starting checkpoint; rl and joint default to <root>/ce/model.ckpt.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Weight of the RL term for --stage joint.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to <root>/<stage>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// How wFT models are decoded when scoring sweep points.
    #[arg(long, value_enum)]
    pub decode_variant: Option<VariantArg>,
    /// Checkpoint to fine-tune; defaults to <root>/rl/model.ckpt.
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Train a single point at this learning rate instead of sweeping.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Single beta' for wFT (with --lr).
    #[arg(long)]
    pub beta_prime: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to <root>/finetune/<method>[-bp].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Frozen reference checkpoint, required by --method bp.
    #[arg(long)]
    pub frozen: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum)]
    pub method: Option<DecodeArg>,
    #[arg(long)]
    pub beam_size: Option<usize>,
    #[arg(long)]
    pub nucleus_p: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub beta_prime: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Caption file; defaults to <root>/captions/<checkpoint stem>-<split>.jsonl.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Row label; defaults to the caption file stem.
    #[arg(long)]
    pub run_id: Option<String>,
    /// Report CSV; defaults to <root>/eval/<run id>.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, value_enum)]
    pub what: Analysis,
    /// Caption file for histogram; without it the split's references are binned.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Checkpoint for sample-freq.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Grid points strictly inside (0, 1) for loss-surface.
    #[arg(long, default_value_t = 99)]
    pub points: usize,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta_prime: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Output CSV; defaults to <root>/analysis/<what>.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Usage("missing --config <experiment file>".into()))?;
    let cfg = config::RunConfig::load(&path)?;
    let ctx = commands::Context::new(cfg);
    match cli.command {
        Command::GenData => ctx.gen_data(),
        Command::Train(a) => ctx.train(&a),
        Command::Finetune(a) => ctx.finetune(&a),
        Command::Decode(a) => ctx.decode(&a),
        Command::Eval(a) => ctx.eval(&a),
        Command::Analyze(a) => ctx.analyze(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
