//! `deepdrl`: runs robust-learning experiments from a JSON config and writes
//! machine-readable results into an output directory.

mod commands;
mod compare;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{Command, Overrides};
use crate::config::ExperimentConfig;
use crate::error::{CliError, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "deepdrl", version, about = "Distributionally robust learning experiments")]
struct Cli {
    #[command(subcommand)]
    action: Action,
}

#[derive(Debug, Subcommand)]
enum Action {
    /// Generate the synthetic shift and score the Bayes predictor with true ratios.
    Simulate(RunArgs),
    /// Joint robust classifier and domain classifier training.
    TrainDrl(RunArgs),
    /// Source-only softmax baseline.
    TrainErm(RunArgs),
    /// Robust self-training with class-balanced pseudo-labels.
    Drst(RunArgs),
    /// Robust consistency training on the unlabeled target.
    Drssl(RunArgs),
    /// Kernel density plug-in ratios over a bandwidth grid.
    PluginSim(RunArgs),
    /// ERM, temperature-scaled ERM and robust learning side by side.
    Calibrate(RunArgs),
    /// Tabulate report.json files (or run directories) as CSV on stdout.
    Compare {
        reports: Vec<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn dispatch(action: Action) -> Result<(), CliError> {
    let (command, args) = match action {
        Action::Compare { reports } => {
            let table = compare::compare(&reports)?;
            print!("{table}");
            return Ok(());
        }
        Action::Simulate(a) => (Command::Simulate, a),
        Action::TrainDrl(a) => (Command::TrainDrl, a),
        Action::TrainErm(a) => (Command::TrainErm, a),
        Action::Drst(a) => (Command::Drst, a),
        Action::Drssl(a) => (Command::Drssl, a),
        Action::PluginSim(a) => (Command::PluginSim, a),
        Action::Calibrate(a) => (Command::Calibrate, a),
    };
    let cfg = ExperimentConfig::load(&args.config)?;
    let overrides = Overrides {
        seed: args.seed,
        out: args.out,
    };
    for path in commands::run(command, cfg, &overrides)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.action) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
