use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bgs_cli::config::ExperimentConfig;
use bgs_cli::runner;
use bgs_cli::CliError;

/// Bilevel-games-with-selection experiment runner.
#[derive(Parser)]
#[command(name = "bgs", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for CSV traces, resolved configs and problem files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the run seeds with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress per-run output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment; one CSV trace per seed.
    Run(Common),
    /// Verify analytic derivatives against finite differences.
    Check(Common),
    /// Run the continuous-time flow diagnostics report.
    Flow(Common),
    /// Generate the configured problem and serialize it to a text file.
    Generate(Common),
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", common.config.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(seed) = common.seed {
        cfg.run.seeds = vec![seed];
    }
    let dir = common
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((cfg, dir))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(common) => {
            let (cfg, dir) = load_config(&common)?;
            let outcomes = runner::run_experiment(&cfg, &common.out, &dir, common.quiet)?;
            if let Some(bad) = outcomes.iter().find(|o| o.diverged()) {
                return Err(CliError::Numerical(format!(
                    "run for seed {} diverged (partial CSV at {})",
                    bad.seed,
                    bad.csv_path.display()
                )));
            }
            Ok(())
        }
        Command::Check(common) => {
            let (cfg, dir) = load_config(&common)?;
            runner::cmd_check(&cfg, &dir, common.quiet).map(|_| ())
        }
        Command::Flow(common) => {
            let (cfg, dir) = load_config(&common)?;
            let report = runner::cmd_flow(&cfg, &dir, common.quiet)?;
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Numerical(
                    "flow diagnostics reported failures".into(),
                ))
            }
        }
        Command::Generate(common) => {
            let (cfg, dir) = load_config(&common)?;
            runner::cmd_generate(&cfg, &common.out, &dir, common.quiet).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
