//! `segpipe` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use segpipe::Error;

#[derive(Parser, Debug)]
#[command(
    name = "segpipe",
    version,
    about = "Learned-normalization segmentation pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Run configuration (JSON). Defaults to the synthetic preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "segpipe_out")]
    pub out: PathBuf,

    /// Overrides the architecture width scale.
    #[arg(long, global = true)]
    pub scale: Option<f64>,

    /// Comma-separated checkpoint files.
    #[arg(long, global = true, value_delimiter = ',')]
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model or an ensemble.
    Train,
    /// Write probability maps for the test set.
    Predict,
    /// Per-image and mean Dice on the test set.
    Evaluate {
        /// Score stored predictions instead of running checkpoints.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "ops")]
        scope: String,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Layer table of an architecture.
    Summary {
        #[arg(long)]
        arch: Option<String>,
        #[arg(long, default_value_t = 512)]
        input_size: usize,
    },
    /// Keep the largest connected component of a probability map.
    Postprocess {
        /// SGT1 tensor of shape [D, H, W] or [H, W].
        #[arg(long)]
        input: PathBuf,
    },
    /// Intensity histograms at the input and pre-processor output.
    Analyze,
    /// Generate the synthetic train/validation datasets.
    GenSynthetic,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json { .. } | Error::CheckpointMismatch(_) => 2,
        Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(commands::Status::Passed) => ExitCode::SUCCESS,
        Ok(commands::Status::CheckFailed) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
