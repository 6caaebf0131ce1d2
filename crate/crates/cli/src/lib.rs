//! Command-line front end: configuration, experiment orchestration and
//! machine-readable output.
//!
//! Exit codes: 0 pass, 1 configuration or I/O error, 2 a check failed,
//! 3 a check was inconclusive, 4 the solver failed.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{CliError, ExitStatus};
use config::Format;

#[derive(Debug, Parser)]
#[command(
    name = "xdiff",
    version,
    about = "Entropy-structure checks and simulations for cross-diffusion systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON (or .toml) run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides experiment.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides output.directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides output.format.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample the structural hypotheses named in experiment.checks.
    Check(Common),
    /// Run the implicit Euler scheme and export the trajectory and ledger.
    Simulate(Common),
    /// Perturbed coarse run against a refined reference.
    Twin(Common),
    /// Twin experiments along one axis of delta, tau or a model parameter.
    Sweep(Common),
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("XDIFF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("XDIFF_THREADS must be a positive integer, got {raw:?}"))?;
    // A pool may already exist when run() is called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitStatus::ConfigError.code()
            } else {
                0
            };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitStatus::ConfigError.code();
    }
    type Handler = fn(config::LoadedConfig) -> Result<ExitStatus, CliError>;
    let (common, command): (&Common, Handler) = match &cli.command {
        Command::Check(c) => (c, commands::cmd_check),
        Command::Simulate(c) => (c, commands::cmd_simulate),
        Command::Twin(c) => (c, commands::cmd_twin),
        Command::Sweep(c) => (c, commands::cmd_sweep),
    };
    let outcome = commands::load(&common.config, common.seed, common.out.clone(), common.format).and_then(command);
    match outcome {
        Ok(status) => status.code(),
        Err(e) => {
            eprintln!("error: {e}");
            e.status().code()
        }
    }
}
