mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{default_experiment, load_config, CliError};

#[derive(Parser)]
#[command(name = "fastslow", about = "Fast-slow homogenization experiment runner")]
struct Cli {
    /// experiment configuration (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// override the simulation and estimator seeds
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// rayon worker threads (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// output directory (overrides the config)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// estimate SDE coefficients and write the coefficient field
    Estimate,
    /// run the fast-slow ensemble ladder against the limiting SDE
    Converge,
    /// run the built-in invariant suites
    Selftest,
    /// emit rescaled (WIP) path samples across the eps ladder
    Wip,
    /// Poincare-section diagnostics and the suspension estimate
    Suspension,
    /// rough-path suites on synthetic drivers
    Rough,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let mut exp = match &cli.config {
        Some(path) => load_config(path)?,
        None => match &cli.cmd {
            Cmd::Selftest | Cmd::Rough => default_experiment(),
            _ => return Err(CliError::Config("--config is required for this command".into())),
        },
    };
    if let Some(seed) = cli.seed {
        exp.cfg.estimator.seed = seed;
        exp.cfg.simulation.seed = seed;
    }
    let out = cli.out.as_deref();
    match &cli.cmd {
        Cmd::Estimate => commands::cmd_estimate(&exp, out),
        Cmd::Converge => commands::cmd_converge(&exp, out),
        Cmd::Selftest => commands::cmd_selftest(&exp, out),
        Cmd::Wip => commands::cmd_wip(&exp, out),
        Cmd::Suspension => commands::cmd_suspension(&exp, out),
        Cmd::Rough => commands::cmd_rough(&exp, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
