//! `spine-cascade`: phantom generation, stage-wise training, inference and evaluation.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 no spine found.

mod commands;
mod config;
mod slices;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spine_cascade::pipeline::PipelineError;

use crate::config::UsageError;

#[derive(Debug, Parser)]
#[command(name = "spine-cascade", version, about = "Vertebra segmentation, localization and identification cascade")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Master seed; overrides the config file. Commands without randomness ignore it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML or JSON config file; relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output location (directory, or checkpoint path for training).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom dataset (config: dataset spec).
    PhantomGen {
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Train the stage-1 semantic net (config: training config).
    TrainStage1,
    /// Train the stage-2 instance net with teacher forcing (config: training config).
    TrainStage2,
    /// Run the cascade on one volume (config: cascade parameters).
    Infer {
        /// Intensity volume in HU.
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        /// Also write mid-axial and mid-sagittal PGM slices.
        #[arg(long)]
        dump_slices: bool,
    },
    /// Score result bundles against phantom case directories, pairwise in order.
    Eval {
        #[arg(long = "pred", required = true)]
        preds: Vec<PathBuf>,
        #[arg(long = "truth", required = true)]
        truths: Vec<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        2
    } else if matches!(err.downcast_ref::<PipelineError>(), Some(PipelineError::NoSpineFound)) {
        4
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PhantomGen { count } => commands::phantom_gen(&cli.common, count),
        Command::TrainStage1 => commands::train(&cli.common, commands::Stage::One),
        Command::TrainStage2 => commands::train(&cli.common, commands::Stage::Two),
        Command::Infer { volume, stage1, stage2, dump_slices } => {
            commands::infer(&cli.common, &volume, &stage1, &stage2, dump_slices)
        }
        Command::Eval { preds, truths } => commands::eval(&cli.common, &preds, &truths),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
