use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use itro_lab::harness::config::{parse_config, RunConfig};
use itro_lab::harness::oracle_check::run_oracle_check;
use itro_lab::harness::run::{resolve_output_dir, run_eval, run_inspect, run_sweep, run_training};

#[derive(Parser)]
#[command(
    name = "itro-lab",
    about = "Desk-scale rationale-training laboratory with exact enumeration oracles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment described by a config file
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint under greedy and sampled decoding
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the exact-identity battery and exit nonzero on any failure
    OracleCheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Annotate the greedy rationale of a seeded query token by token
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        query_seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train once per value of the candidate-count grid
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// grid in the form n=1,2,5,10,20,40
        #[arg(long, default_value = "n=1,2,5,10,20,40")]
        grid: String,
    },
}

fn load_config(path: &PathBuf) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn parse_grid(grid: &str) -> Result<Vec<usize>, String> {
    let values = grid
        .strip_prefix("n=")
        .ok_or_else(|| format!("grid must look like n=1,2,5 (got '{grid}')"))?;
    values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| format!("grid value '{v}' is not an integer"))
        })
        .collect()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let out_dir = resolve_output_dir(&cfg);
            let report = run_training(&cfg, &out_dir).map_err(|e| e.to_string())?;
            println!(
                "{}",
                serde_json::to_string(&report).map_err(|e| e.to_string())?
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { checkpoint, config } => {
            let cfg = load_config(&config)?;
            for summary in run_eval(&cfg, &checkpoint).map_err(|e| e.to_string())? {
                println!(
                    "{}",
                    serde_json::to_string(&summary).map_err(|e| e.to_string())?
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::OracleCheck { config } => {
            let cfg = load_config(&config)?;
            let (reports, all_pass) = run_oracle_check(&cfg).map_err(|e| e.to_string())?;
            for r in &reports {
                println!(
                    "{}",
                    serde_json::to_string(r).map_err(|e| e.to_string())?
                );
            }
            if all_pass {
                Ok(ExitCode::SUCCESS)
            } else {
                let failing: Vec<&str> = reports
                    .iter()
                    .filter(|r| !r.pass)
                    .map(|r| r.identity.as_str())
                    .collect();
                Err(format!("identity check failed: {}", failing.join(", ")))
            }
        }
        Command::Inspect {
            checkpoint,
            query_seed,
            config,
        } => {
            let cfg = match config {
                Some(path) => load_config(&path)?,
                None => parse_config("").map_err(|e| e.to_string())?,
            };
            for line in
                run_inspect(&cfg, &checkpoint, query_seed).map_err(|e| e.to_string())?
            {
                println!("{line}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, grid } => {
            let cfg = load_config(&config)?;
            let grid = parse_grid(&grid)?;
            let out_dir = resolve_output_dir(&cfg);
            for point in run_sweep(&cfg, &grid, &out_dir).map_err(|e| e.to_string())? {
                println!(
                    "{}",
                    serde_json::to_string(&point).map_err(|e| e.to_string())?
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
