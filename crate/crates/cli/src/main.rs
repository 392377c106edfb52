use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use nested_dgd::harness::{build_instance, run_experiment, ExperimentConfig, HarnessError};

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "nested-dgd",
    version,
    about = "Run stochastic NEAR-DGD experiments over simulated networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (method, seed) pair and write CSVs plus summary.json.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated run seeds (overrides `seeds`).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Iteration count (overrides `iterations`).
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Print the theoretical constants as JSON.
    Constants { config: PathBuf },
    /// Parse and validate a configuration.
    Validate { config: PathBuf },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<HarnessError>() {
        Some(HarnessError::Io { .. }) => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
    Ok(ExperimentConfig::from_path(path).map_err(HarnessError::from)?)
}

fn execute(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = load(&config)?;
            println!(
                "{}: ok ({} methods, {} seeds)",
                config.display(),
                cfg.methods.len(),
                cfg.seeds.len()
            );
            Ok(0)
        }
        Command::Constants { config } => {
            let cfg = load(&config)?;
            let n = cfg.agent_counts()[0];
            let inst = build_instance(&cfg, n)?;
            let constants = inst.constants(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&constants)?);
            Ok(0)
        }
        Command::Run {
            config,
            out,
            seeds,
            iterations,
        } => {
            let mut cfg = load(&config)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            cfg.validate().map_err(HarnessError::from)?;
            let output =
                run_experiment(&cfg).with_context(|| format!("running {}", config.display()))?;
            for (n, report) in &output.summaries {
                for m in &report.methods {
                    let plateau = m
                        .mean_plateau
                        .map_or("n/a".to_string(), |p| format!("{p:.6e}"));
                    println!(
                        "n={n} {:<28} seeds_ok={:<3} plateau={plateau}",
                        m.method, m.seeds_ok
                    );
                }
            }
            println!(
                "wrote {} files to {}",
                output.files.len(),
                cfg.output_dir.display()
            );
            if output.all_failed() {
                eprintln!("error: every run diverged");
                return Ok(EXIT_DIVERGED);
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
