use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Block-benefit structured pruning of small vision transformers.
#[derive(Parser, Debug)]
#[command(name = "blockprune", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that runs a model.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Run directory; created if missing.
    #[arg(long, value_name = "DIR", default_value = "runs/latest")]
    pub out: PathBuf,
    /// Train the backbone at a negligible learning rate while pruning.
    #[arg(long)]
    pub frozen: bool,
    /// Overrides the global keep ratio.
    #[arg(long, value_name = "F")]
    pub keep_ratio: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a dense baseline.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run the full pruning schedule, compact the model and fine-tune it.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint instead of a fresh initialisation.
        #[arg(long, value_name = "CKPT")]
        init: Option<PathBuf>,
        /// Baseline run directory for the accuracy delta.
        #[arg(long, value_name = "DIR")]
        baseline: Option<PathBuf>,
    },
    /// Train fresh block heads on frozen checkpoints and write BP curves.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to probe; each one labels its rows by file stem.
        #[arg(required = true, value_name = "CKPT")]
        checkpoints: Vec<PathBuf>,
    },
    /// Summarise a finished run directory.
    Report {
        #[arg(value_name = "DIR")]
        run_dir: PathBuf,
    },
    /// Validation loss and accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate on the configured validation set.
        #[arg(value_name = "CKPT")]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common } => commands::train(&common),
        Command::Prune { common, init, baseline } => commands::prune(&common, init, baseline),
        Command::Probe { common, checkpoints } => commands::probe(&common, &checkpoints),
        Command::Report { run_dir } => commands::report(&run_dir),
        Command::Eval { common, checkpoint } => commands::eval(&common, &checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
