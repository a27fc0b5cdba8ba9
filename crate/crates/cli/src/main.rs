//! `selforder` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 convergence failure (the bundle is still written when possible;
//! a scan with failed points exits 3 after writing its bundle),
//! 1 I/O error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] selforder::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(selforder::Error::InvalidArgument(_)) => 2,
            CliError::Core(selforder::Error::Timeout { .. }) => 4,
            CliError::Core(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "selforder", version, about = "Self-ordering of trapped particles in a multimode cavity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// TOML configuration, or the metadata.json of an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: the config's `out`, else `out/<command>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses all cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Base seed of the trajectory random streams.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Coupling matrices A, B and trap energies.
    Couplings(Common),
    /// Steady state and its observables.
    Steady(Common),
    /// Master-equation time evolution from the ground state and vacuum.
    Evolve(Common),
    /// Quantum-trajectory ensemble.
    Mcwf(Common),
    /// Parameter scan over one or two configuration fields.
    Scan(Common),
}

fn run(cli: Cli) -> Result<commands::Outcome, CliError> {
    let (name, common) = match &cli.command {
        Command::Couplings(c) => ("couplings", c),
        Command::Steady(c) => ("steady", c),
        Command::Evolve(c) => ("evolve", c),
        Command::Mcwf(c) => ("mcwf", c),
        Command::Scan(c) => ("scan", c),
    };
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(w) = common.workers {
        cfg.solver.workers = w;
    }
    if let Some(s) = common.seed {
        cfg.solver.seed = s;
    }
    cfg.validate()?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(name));
    match cli.command {
        Command::Couplings(_) => commands::couplings(&cfg, &out),
        Command::Steady(_) => commands::steady(&cfg, &out),
        Command::Evolve(_) => commands::evolve(&cfg, &out),
        Command::Mcwf(_) => commands::mcwf(&cfg, &out),
        Command::Scan(_) => commands::scan(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            for note in &outcome.notes {
                eprintln!("warning: {note}");
            }
            if outcome.failed {
                ExitCode::from(3)
            } else if outcome.converged {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(4)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
