//! `isalt`: infer explicit large time-step integration schemes for ergodic
//! SDEs from fine-step implicit-solver data, simulate them, and validate
//! their large-time statistics.
//!
//! Exit codes: 0 success, 2 config error, 3 numerical failure, 4 missing
//! artifact. `ISALT_THREADS` caps the worker count.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::simulate::SimulateArgs;
use commands::study::StudyKind;
use config::load_config;
use error::CliResult;

#[derive(Parser)]
#[command(
    name = "isalt",
    about = "Inference of large time-step integration schemes for ergodic SDEs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Built-in preset, e.g. double-well-desk, gradient-2d-desk, lorenz-desk
    /// (or the -paper variants).
    #[arg(long, value_name = "NAME", conflicts_with = "config")]
    preset: Option<String>,
    /// Override the output directory.
    #[arg(short, long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<config::ExperimentConfig> {
        load_config(self.config.as_deref(), self.preset.as_deref(), self.out.as_deref())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the reference trajectory and one dataset per gap.
    GenData(ConfigArgs),
    /// Estimate scheme coefficients and residual scales for every
    /// (family, gap) pair.
    Infer(ConfigArgs),
    /// Run one inferred scheme from its JSON file.
    Simulate {
        /// Inferred scheme file (written by `isalt infer`).
        #[arg(short, long, value_name = "FILE")]
        scheme: PathBuf,
        /// Number of steps.
        #[arg(short = 'n', long, value_name = "STEPS")]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Record every this many steps.
        #[arg(long, default_value_t = 1, value_name = "K")]
        record_every: usize,
        /// Initial state as comma-separated values (defaults to the
        /// system's standard start).
        #[arg(long, value_name = "V1,V2,..")]
        x0: Option<String>,
        /// Export the path in the dataset container format.
        #[arg(short, long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Simulate every inferred scheme and compare invariant statistics
    /// against the reference.
    Evaluate(ConfigArgs),
    /// Estimator/residual diagnostics and blow-up scans.
    Study {
        #[arg(value_enum)]
        kind: StudyKind,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Aggregate evaluation and study summaries into report.json.
    Report(ConfigArgs),
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var("ISALT_THREADS") {
        match value.parse::<usize>() {
            Ok(n) if n > 0 => {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .expect("thread pool is configured before any parallel work");
            }
            _ => {
                eprintln!("warning: ignoring invalid ISALT_THREADS value {value:?}");
            }
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(args) => commands::gen_data::run(&args.load()?),
        Command::Infer(args) => commands::infer::run(&args.load()?),
        Command::Simulate {
            scheme,
            steps,
            seed,
            record_every,
            x0,
            out,
        } => commands::simulate::run(&SimulateArgs {
            scheme: &scheme,
            steps,
            seed,
            record_every,
            x0,
            out: out.as_deref(),
        }),
        Command::Evaluate(args) => commands::evaluate::run(&args.load()?),
        Command::Study { kind, config } => commands::study::run(&config.load()?, kind),
        Command::Report(args) => commands::report::run(&args.load()?),
    }
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
