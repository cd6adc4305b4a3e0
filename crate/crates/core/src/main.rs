use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use remamba::cli::{self, EvalOptions, SweepOptions};
use remamba::compression::{Placement, Strategy};
use remamba::error::Error;
use remamba::runconfig::RunConfig;

#[derive(Parser)]
#[command(
    name = "remamba",
    about = "Selective-compression pipeline on a minimal selective state-space LM: train, evaluate, sweep, benchmark, and gradient-check from one JSON config"
)]
struct Cli {
    /// JSON run config; omitted = built-in desk-scale defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-key config overrides, repeatable: --set compression.p=0.18
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured synthetic task; writes checkpoint.bin and metrics.jsonl
    Train,
    /// Exact-match evaluation across context lengths; writes eval_report.csv
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate freshly initialized weights instead of a checkpoint
        #[arg(long)]
        random_init: bool,
        /// Override the evaluated context lengths, comma separated
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        /// Selection strategy override: topk | random | fixed_interval
        #[arg(long)]
        strategy: Option<String>,
        /// Placement override: standard | middle | special-append
        #[arg(long)]
        placement: Option<String>,
    },
    /// Accuracy grid over (p, rho); writes sweep.csv
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        p_values: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        rho_values: Vec<f64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        random_init: bool,
        /// Context length for the grid (default: first of tasks.eval_lengths)
        #[arg(long)]
        length: Option<usize>,
    },
    /// Decode memory/throughput vs context length; writes bench.csv
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        random_init: bool,
    },
    /// Finite-difference check of every parameter group; writes gradcheck.csv
    Gradcheck,
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, raw: &str) -> Result<T, Error> {
    serde_json::from_value(serde_json::Value::String(raw.to_string()))
        .map_err(|_| Error::config(format!("unrecognized {what}: {raw}")))
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = RunConfig::resolve(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::Train => {
            let artifacts = cli::cmd_train(&config)?;
            println!("checkpoint: {}", artifacts.checkpoint.display());
            println!("metrics:    {}", artifacts.metrics.display());
            println!("final loss: {:.6}", artifacts.final_loss);
        }
        Command::Eval {
            checkpoint,
            random_init,
            lengths,
            strategy,
            placement,
        } => {
            let opts = EvalOptions {
                checkpoint,
                random_init,
                lengths,
                strategy: strategy
                    .as_deref()
                    .map(|s| parse_enum::<Strategy>("strategy", s))
                    .transpose()?,
                placement: placement
                    .as_deref()
                    .map(|s| parse_enum::<Placement>("placement", s))
                    .transpose()?,
            };
            let path = cli::cmd_eval(&config, &opts)?;
            println!("eval report: {}", path.display());
        }
        Command::Sweep {
            p_values,
            rho_values,
            checkpoint,
            random_init,
            length,
        } => {
            let opts = SweepOptions {
                p_values,
                rho_values,
                checkpoint,
                random_init,
                length,
            };
            let path = cli::cmd_sweep(&config, &opts)?;
            println!("sweep grid: {}", path.display());
        }
        Command::Bench {
            checkpoint,
            random_init,
        } => {
            let path = cli::cmd_bench(&config, checkpoint.as_deref(), random_init)?;
            println!("bench report: {}", path.display());
        }
        Command::Gradcheck => {
            let (path, all_pass) = cli::cmd_gradcheck(&config)?;
            println!("gradcheck table: {}", path.display());
            if !all_pass {
                return Err(Error::contract("gradient check failed; see table above"));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
