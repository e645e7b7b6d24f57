//! `structlight` command-line tool: dataset building, training, enhancement
//! and evaluation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
//! (I/O, unreadable checkpoint, diverged training).

mod commands;
mod config;
mod plot;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage_err(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "{m}"),
            Self::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<structlight::Error> for CliError {
    fn from(e: structlight::Error) -> Self {
        match e {
            structlight::Error::Usage(m) | structlight::Error::Config(m) => Self::Usage(m),
            other => Self::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "structlight", version, about = "Structure-guided low-light image enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a paired low/high/edge dataset from normal-light PNGs.
    MakeData(MakeDataArgs),
    /// Train the model on a dataset built by make-data.
    Train(TrainArgs),
    /// Enhance low-light images with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Score predictions against ground truth (PSNR, SSIM, edge CE/L2).
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct MakeDataArgs {
    /// TOML file with the command's settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of normal-light PNGs.
    #[arg(long)]
    pub src: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the degradation noise.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Generate this many synthetic scenes as the source set.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Side length of synthetic scenes.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (contains manifest.json).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Model preset: desk or tiny.
    #[arg(long)]
    pub model: Option<String>,
    /// disable_A, disable_S, disable_guidance, disable_gan or baseline_edge_net; repeatable.
    #[arg(long)]
    pub ablation: Vec<String>,
    /// Save a checkpoint every N steps.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Input PNG files or directories of PNGs.
    #[arg(long = "input", num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the appearance estimate and the predicted edge map (under
    /// appearance/ and edges/ with the same file names).
    #[arg(long)]
    pub dump_intermediates: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of predicted images.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Directory of ground-truth images with the same file names.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Predicted edge maps, scored against --gt-edges.
    #[arg(long)]
    pub pred_edges: Option<PathBuf>,
    #[arg(long)]
    pub gt_edges: Option<PathBuf>,
    /// Where report.json and report.csv go.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::MakeData(a) => commands::make_data(a),
        Command::Train(a) => commands::train(a),
        Command::Enhance(a) => commands::enhance(a),
        Command::Eval(a) => commands::eval(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
