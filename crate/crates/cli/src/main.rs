use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use slowfast_cli::{cmd_check, cmd_epsilon_sweep, cmd_exit_times, cmd_simulate, load_config};

/// Simulation laboratory for stochastically perturbed integrable systems.
#[derive(Parser)]
#[command(name = "slowfast", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured systems and write snapshot CSVs.
    Simulate {
        /// Experiment configuration (TOML).
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Compare full-system and effective action laws across the ε list.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// First-passage statistics out of the configured box.
    ExitTimes {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Report on the model assumptions (non-resonance, rank, coercivity,
    /// moment boundedness).
    Check {
        #[arg(short, long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (path, run): (&PathBuf, fn(slowfast_cli::ExperimentConfig) -> _) = match &cli.command {
        Command::Simulate { config } => (config, cmd_simulate),
        Command::Sweep { config } => (config, cmd_epsilon_sweep),
        Command::ExitTimes { config } => (config, cmd_exit_times),
        Command::Check { config } => (config, cmd_check),
    };
    let cfg = match load_config(path) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
