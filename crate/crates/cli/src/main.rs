//! Batch pipeline driver: data generation, training, detection, evaluation,
//! sweeps, and plots. Configured by a TOML file plus `U2AD_*` environment
//! variables and flags; exit codes signal the failure class.

mod commands;
mod config;
mod plot;
mod rundir;

use clap::{Parser, Subcommand, ValueEnum};
use config::{Overrides, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;
use u2ad_core::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "u2ad", version, about = "masked-reconstruction anomaly detection pipeline")]
struct Cli {
    /// TOML config; omitted sections use built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; every random draw in the pipeline derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "PATH")]
    run_dir: Option<PathBuf>,
    /// 1 pretrain-only, 2 adapt-only, 3 pretrain then adapt.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=3))]
    strategy: Option<u8>,
    #[arg(long, global = true, value_enum)]
    device: Option<Device>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Device {
    Cpu,
    Accelerator,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the phantom corpus into the data directory.
    GenData,
    /// Pretrain the masked autoencoder on the healthy split.
    Pretrain,
    /// Adapt the model on the target split per the chosen strategy.
    Adapt,
    /// Score the target split; write per-case reports and the score table.
    Detect,
    /// Repeated cross-validated detection metrics from the score table.
    Eval,
    /// Robustness and ensemble-size sweeps.
    Sweep,
    /// Render reports as PNG plots.
    Plot,
}

fn run(cli: Cli) -> Result<()> {
    let over = Overrides {
        config: cli.config,
        seed: cli.seed,
        run_dir: cli.run_dir,
        strategy: cli.strategy,
        device: cli.device.map(|d| {
            match d {
                Device::Cpu => "cpu",
                Device::Accelerator => "accelerator",
            }
            .to_string()
        }),
    };
    let cfg = RunConfig::resolve(&over)?;
    match cli.command {
        Cmd::GenData => commands::gen_data(&cfg),
        Cmd::Pretrain => commands::pretrain(&cfg),
        Cmd::Adapt => commands::adapt(&cfg),
        Cmd::Detect => commands::detect(&cfg),
        Cmd::Eval => commands::eval(&cfg),
        Cmd::Sweep => commands::sweep(&cfg),
        Cmd::Plot => plot::plot(&cfg),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Precondition(_) => 3,
        Error::Divergence(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
