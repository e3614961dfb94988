mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kban_core::Error;

#[derive(Parser, Debug)]
#[command(name = "kban", version, about = "Human-object interaction detection with bidirectional attention")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration, merged over the defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for data generation, training order and initialization.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Config override, e.g. `--set train.iterations=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic train/val/test scene files and the knowledge base.
    Generate,
    /// Train a model and write metrics and checkpoints.
    Train {
        /// Continue from this checkpoint.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Role mAP of a checkpoint on a scene file.
    Eval {
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        scenes: Option<PathBuf>,
    },
    /// Scored triplets for every scene of a file.
    Infer {
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        scenes: Option<PathBuf>,
        #[command(flatten)]
        thresholds: Thresholds,
        /// Write decoder attention of one pair: `HUMAN:OBJECT` ids, or `SCENE:HUMAN:OBJECT`.
        #[arg(long, value_name = "PAIR_ID")]
        dump_attention: Option<String>,
    },
    /// List a checkpoint's hyperparameters and tensors.
    Inspect {
        checkpoint: PathBuf,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct Thresholds {
    #[arg(long, value_name = "T")]
    pub t_human: Option<f64>,
    #[arg(long, value_name = "T")]
    pub t_object: Option<f64>,
    #[arg(long, value_name = "T")]
    pub suppression_threshold: Option<f64>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
