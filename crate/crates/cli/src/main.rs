//! `priorfuse`: pilot, select, train, fuse, eval and freq subcommands over
//! the core library.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 1 for
//! runtime failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use priorfuse_core::data::Split;
use priorfuse_core::encoder::Modality;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<priorfuse_core::Error> for Failure {
    fn from(e: priorfuse_core::Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(name = "priorfuse", version, about = "Infrared/visible image fusion guided by segmentation priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one modality's segmentation branch and record its feature weights.
    Pilot(PilotArgs),
    /// Pick the significant features from a pilot's weight trajectory.
    Select(SelectArgs),
    /// Train the joint fusion network from both pilots.
    Train(TrainArgs),
    /// Fuse image pairs with a trained checkpoint.
    Fuse(FuseArgs),
    /// Score fused images against their sources.
    Eval(EvalArgs),
    /// Spectral profiles of the fusion inputs for one pair.
    Freq(FreqArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Ir,
    Vi,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Ir => Modality::Ir,
            ModalityArg::Vi => Modality::Vi,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overwrite a non-empty output location.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PilotArgs {
    #[arg(long, value_enum)]
    modality: ModalityArg,
    #[arg(long)]
    out: PathBuf,
    /// Dataset root (falls back to the config, then DSF_CACHE).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SelectArgs {
    /// `weights_<modality>.csv` written by `pilot`.
    #[arg(long)]
    trajectory: PathBuf,
    /// Defaults to the modality in the trajectory file name.
    #[arg(long, value_enum)]
    modality: Option<ModalityArg>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    /// Selection JSON to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ir_checkpoint: Option<PathBuf>,
    #[arg(long)]
    ir_selection: Option<PathBuf>,
    #[arg(long)]
    vi_checkpoint: Option<PathBuf>,
    #[arg(long)]
    vi_selection: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dataset root; ignored when --ir and --vi are given.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, requires = "vi")]
    ir: Option<PathBuf>,
    #[arg(long, requires = "ir")]
    vi: Option<PathBuf>,
    /// Write RGB outputs with the visible chroma reattached.
    #[arg(long)]
    rgb: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of fused `<id>.png` images.
    #[arg(long)]
    fused: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Directory of predicted `<id>.png` label maps to score against the labels.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Number of classes for segmentation scoring (defaults to the config's model).
    #[arg(long)]
    classes: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct FreqArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    ir: PathBuf,
    #[arg(long)]
    vi: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = priorfuse_core::freqprobe::DEFAULT_BINS)]
    bins: usize,
    /// Normalized radius below which energy counts as low frequency.
    #[arg(long, default_value_t = priorfuse_core::freqprobe::DEFAULT_CUTOFF)]
    cutoff: f64,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pilot(a) => commands::pilot(a),
        Command::Select(a) => commands::select(a),
        Command::Train(a) => commands::train(a),
        Command::Fuse(a) => commands::fuse(a),
        Command::Eval(a) => commands::eval(a),
        Command::Freq(a) => commands::freq(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
