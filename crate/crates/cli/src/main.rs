//! `flowsem`: simulate synthetic incomplete interventional datasets, fit
//! cyclic causal graphs plus missingness mechanisms by penalized EM,
//! evaluate against ground truth, and run benchmark sweeps.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 training failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowsem_cli::commands;
use flowsem_cli::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "flowsem", version, about)]
struct Cli {
    /// Worker threads (default: FLOWSEM_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a ground-truth instance and write its dataset.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the instance seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a model to a dataset CSV.
    Fit {
        /// Dataset CSV produced by `simulate` (or an external tool).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// The dataset was imputed externally; refuse missing cells.
        #[arg(long)]
        pre_imputed: bool,
    },
    /// Compare a checkpoint against a ground-truth sidecar.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Output metrics JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Held-out split for the proxy log-likelihood.
        #[arg(long)]
        test_data: Option<PathBuf>,
        /// Edge-strength threshold for graph extraction.
        #[arg(long, default_value_t = 0.1)]
        edge_threshold: f64,
    },
    /// Sweep missing rates and seeds, emitting a plot-ready CSV table.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the base seed of the sweep.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn init_threads(requested: Option<usize>) {
    let from_env = std::env::var("FLOWSEM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    if let Some(n) = requested.or(from_env) {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    use flowsem::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_)) | Some(Error::Checkpoint(_)) => 2,
        Some(Error::Data { .. }) | Some(Error::Io(_)) | Some(Error::DimensionMismatch(_)) => 3,
        Some(_) => 4,
        // anything not from the library is a configuration problem
        None => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_simulate(&cfg, &out, seed)
        }
        Command::Fit {
            data,
            config,
            out,
            seed,
            pre_imputed,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_fit(&data, &cfg, &out, seed, pre_imputed)
        }
        Command::Evaluate {
            checkpoint,
            truth,
            out,
            test_data,
            edge_threshold,
        } => commands::cmd_evaluate(
            &checkpoint,
            &truth,
            &out,
            test_data.as_deref(),
            edge_threshold,
        ),
        Command::Benchmark { config, out, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            commands::cmd_benchmark(&cfg, &out, seed)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads(cli.threads);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
