//! Command-line driver for debiased-gradient experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use richsgd::Error;
use richsgd_cli::config::load_config;
use richsgd_cli::experiment::{
    run_bias_sweep_command, run_estimate_mech_command, run_generate, run_robustness_command,
    run_train_command, run_verify_command,
};

#[derive(Parser)]
#[command(
    name = "richsgd",
    version,
    about = "Richardson-debiased stochastic gradients under missing covariates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if absent).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic datasets, the realized mask, and the mechanism.
    Generate,
    /// Paired-replication training across the configured methods.
    Train,
    /// Exact bias of each method across masking scales, with fitted slopes.
    BiasSweep,
    /// Fit the missingness mechanism from one masked replication.
    EstimateMech,
    /// Train extrapolated methods under deliberately perturbed intensities.
    Robustness,
    /// Check the core bias identities on frozen instances.
    Verify,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> richsgd::Result<ExitCode> {
    if let Some(n) = cli.threads {
        // Ignore failure if a pool was already installed.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    if matches!(cli.command, Command::Verify) {
        let ok = run_verify_command(Some(&cli.out))?;
        return Ok(if ok {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(1)
        });
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("--config is required for this subcommand".into()))?;
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Generate => run_generate(&cfg, &cli.out)?,
        Command::Train => run_train_command(&cfg, &cli.out)?,
        Command::BiasSweep => run_bias_sweep_command(&cfg, &cli.out)?,
        Command::EstimateMech => run_estimate_mech_command(&cfg, &cli.out)?,
        Command::Robustness => run_robustness_command(&cfg, &cli.out)?,
        Command::Verify => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}
