//! `trimetric`: train, evaluate and verify triplet metric models.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration or input error,
//! 3 numerical failure (non-finite values, degenerate normalization).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "trimetric", version, about = "Triplet relative-distance metric learning for person re-identification")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for initialization, sampling, splits and synthetic data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train with batch-mode image-based gradient descent.
    Train(commands::TrainArgs),
    /// Compute the CMC curve of a trained model on the held-out persons.
    Eval(commands::EvalArgs),
    /// Run gradient and propagation-count self-checks.
    Verify(commands::VerifyArgs),
    /// Write a synthetic dataset as a `<person>/<image>.png` tree.
    Synth(commands::SynthArgs),
}

/// Maps an error to the process exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<trimetric::Error>())
        .any(trimetric::Error::is_numeric);
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    if let Some(n) = cli.common.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    let result = match cli.command {
        Command::Train(args) => commands::train(&cli.common, &args),
        Command::Eval(args) => commands::eval(&cli.common, &args),
        Command::Verify(args) => commands::verify(&cli.common, &args),
        Command::Synth(args) => commands::synth(&cli.common, &args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
