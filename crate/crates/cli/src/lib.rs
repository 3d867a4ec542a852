//! Command-line experiments: dataset generation, curriculum training,
//! autoregressive rollout and long-video evaluation.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use wmlab_core::backbone::Command as DriveCommand;
use wmlab_core::Error;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "wmlab", version, about = "Desk-scale long-horizon video world model laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Commands,
}

#[derive(Debug, Subcommand)]
pub enum Commands {
    /// Render a procedural driving dataset
    Datagen(DatagenArgs),
    /// Train a model through the window-length curriculum
    Train(TrainArgs),
    /// Generate a long clip chunk by chunk from a checkpoint
    Rollout(RolloutArgs),
    /// Score generated clips against reference clips
    Eval(EvalArgs),
}

#[derive(Debug, clap::Args)]
pub struct DatagenArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Number of clips [default: from config]
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub clips: Option<u32>,
    /// Frames per clip [default: from config]
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=65535))]
    pub frames: Option<u32>,
    /// Frame height in pixels [default: from config]
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=65535))]
    pub height: Option<u32>,
    /// Frame width in pixels [default: from config]
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=65535))]
    pub width: Option<u32>,
    /// Frames per second [default: from config]
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..))]
    pub fps: Option<u8>,
    /// Scene seed [default: from config]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run configuration JSON
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Run configuration JSON [default: desk setup]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by datagen
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the log and checkpoints
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DriveArg {
    Straight,
    Left,
    Right,
}

impl From<DriveArg> for DriveCommand {
    fn from(d: DriveArg) -> Self {
        match d {
            DriveArg::Straight => DriveCommand::Straight,
            DriveArg::Left => DriveCommand::Left,
            DriveArg::Right => DriveCommand::Right,
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct RolloutArgs {
    /// Checkpoint (.idck) with its JSON sidecar
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Condition clip (.toyr) holding exactly the memory frames, or "none"
    /// for a text-only start
    #[arg(long)]
    pub cond: String,
    /// Take the memory frames from this frame of a longer condition clip
    #[arg(long)]
    pub cond_offset: Option<usize>,
    /// Number of generated chunks
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub iters: u32,
    /// Caption [default: the condition clip's caption]
    #[arg(long)]
    pub caption: Option<String>,
    /// Driving command for generated frames [default: the condition's last]
    #[arg(long, value_enum)]
    pub command: Option<DriveArg>,
    /// Noise seed; different seeds give different futures
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output clip (.toyr); a JSON sidecar is written next to it
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration JSON for sampler settings
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Generated clips: a .toyr file or a directory of them
    #[arg(long)]
    pub gen: PathBuf,
    /// Reference clips: a .toyr file or a directory of them
    #[arg(long = "ref", value_name = "REF")]
    pub reference: PathBuf,
    /// Comma-separated metric names [default: all]
    #[arg(long)]
    pub metrics: Option<String>,
    /// Frames per curve window [default: from config]
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..))]
    pub window: Option<u32>,
    /// Output directory for report.json and curves.csv
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration JSON for metric settings
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// A command-line mistake that clap cannot catch.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => EXIT_USAGE,
                Error::Tensor(_) | Error::NonFiniteLoss { .. } | Error::UndefinedMetric(_) => EXIT_NUMERIC,
                Error::Contract(_) | Error::Data(_) | Error::Format { .. } | Error::Io { .. } => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

/// Applies `WM_THREADS` to the global worker pool.
fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("WM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| UsageError(format!("WM_THREADS must be a positive integer, got {v:?}")))?;
        // a pool built earlier in this process keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Commands::Datagen(a) => commands::datagen(&a),
        Commands::Train(a) => commands::train(&a),
        Commands::Rollout(a) => commands::rollout(&a),
        Commands::Eval(a) => commands::eval(&a),
    }
}

/// The error chain on one line, skipping causes their parent already quotes.
pub fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            exit_code(&e)
        }
    }
}
