//! Command-line experiments over the `nmsparse` library.
//!
//! Every command writes its artifacts and a `manifest.txt` into `--out`.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use nmsparse::mask::{MaskError, Pattern};
use nmsparse::models::ModelError;
use nmsparse::pruners::PruneError;
use nmsparse::sparse::SparseError;
use nmsparse::trainer::{ConfigError, TrainError};

pub use commands::{bench, eval, learn, pack, pretrain, prune, transfer, unpack};
pub use manifest::Manifest;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Failure of one command. Validation errors exit with 1, runtime errors
/// with 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<MaskError> for CliError {
    fn from(e: MaskError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Divergence { .. } => CliError::Runtime(e.to_string()),
            ModelError::Format(_) | ModelError::Data(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<PruneError> for CliError {
    fn from(e: PruneError) -> Self {
        match e {
            PruneError::Model(m) => m.into(),
            PruneError::Mask(m) => m.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<SparseError> for CliError {
    fn from(e: SparseError) -> Self {
        match e {
            SparseError::Format(_) => CliError::Runtime(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Mask(m) => m.into(),
            TrainError::MissingPrior(_)
            | TrainError::UnknownLayer(_)
            | TrainError::ConfigMismatch
            | TrainError::CheckpointMismatch(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "nmsparse", version, about = "Learnable N:M sparsity masks for small language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain a dense character-level transformer.
    Pretrain(PretrainArgs),
    /// One-shot magnitude or Wanda masks.
    Prune(PruneArgs),
    /// Learn masks with Gumbel-softmax sampling.
    Learn(LearnArgs),
    /// Continue mask learning from a base archive or checkpoint on new data.
    Transfer(TransferArgs),
    /// Perplexity of the dense and masked model.
    Eval(EvalArgs),
    /// Encode a dense mask file as a coded archive.
    Pack(PackArgs),
    /// Decode a coded archive into a dense mask file.
    Unpack(PackArgs),
    /// Time dense against 2:4 sparse matrix products.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Root seed; every component derives its own stream from it.
    /// Overrides `seed` in the config file. Defaults to 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Corpus file, or `synthetic:<a|b|mixed>[:<bytes>]`.
    #[arg(long)]
    pub corpus: String,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Upper bound on validation batches.
    #[arg(long, default_value_t = 8)]
    pub eval_batches: usize,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 128)]
    pub context: usize,
}

#[derive(Debug, Clone, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    /// `magnitude` or `wanda`.
    #[arg(long, default_value = "magnitude")]
    pub method: String,
    #[arg(long, default_value = "2:4")]
    pub pattern: String,
    /// Comma-separated layers or tensors left dense.
    #[arg(long, default_value = "")]
    pub skip_layers: String,
    /// Activation rows used for Wanda statistics.
    #[arg(long, default_value_t = 1024)]
    pub calibration_samples: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

/// Flags shared by `learn` and `transfer`; each overrides the config file.
#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    /// `key=value` file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Prior strength.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of the remaining-weight regularizer.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub skip_layers: Option<String>,
    #[arg(long)]
    pub pattern: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct LearnArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub model: PathBuf,
    /// `none`, `magnitude`, `wanda`, or a mask archive path.
    #[arg(long, default_value = "none")]
    pub prior: String,
    #[arg(long, default_value_t = 1024)]
    pub calibration_samples: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub model: PathBuf,
    /// Mask archive or training checkpoint to start from.
    #[arg(long)]
    pub base: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// `all`, `each`, `first:<k>`, `last:<k>`, or a comma-separated list.
    #[arg(long)]
    pub skip_layers: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Debug, Clone, Args)]
pub struct PackArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated square sizes, each divisible by 4.
    #[arg(long, default_value = "256,512,1024")]
    pub sizes: String,
    #[arg(long, default_value_t = 64)]
    pub rhs_cols: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// `f32` or `f64`.
    #[arg(long, default_value = "f32")]
    pub dtype: String,
}

pub(crate) fn parse_pattern(s: &str) -> Result<Pattern, CliError> {
    s.parse::<Pattern>().map_err(|e| CliError::Validation(format!("--pattern: {e}")))
}

pub(crate) fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
}

/// Parses `args` (including the program name) and runs the command,
/// returning its report text.
pub fn run<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Validation(e.to_string()))?;
    dispatch(&cli.command)
}

/// Runs one command and returns its report text.
pub fn dispatch(command: &Command) -> Result<String, CliError> {
    match command {
        Command::Pretrain(a) => pretrain(a),
        Command::Prune(a) => prune(a),
        Command::Learn(a) => learn(a),
        Command::Transfer(a) => transfer(a),
        Command::Eval(a) => eval(a),
        Command::Pack(a) => pack(a),
        Command::Unpack(a) => unpack(a),
        Command::Bench(a) => bench(a),
    }
}
