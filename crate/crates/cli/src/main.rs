//! Batch experiment front end for the routing simulator: generates mobility
//! traces, trains the learned agent, evaluates strategies over seeded
//! replications, sweeps scenario axes, and exports Q-value grids. All
//! artifacts are plain text (trace files, checkpoints, CSV) and every
//! command is deterministic for a fixed config, so re-runs reproduce output
//! bytes exactly.

mod commands;
mod config;
mod csv;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hopsim::error::Error;

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "hopsim",
    version,
    about = "Single-copy packet routing experiments in mobile wireless networks"
)]
struct Cli {
    /// TOML experiment config; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set sim.range=60 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Where artifacts are written; overrides run.out_dir.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random-waypoint mobility trace file.
    GenerateMobility {
        /// Trace destination; default <out-dir>/trace.txt.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train an agent; writes agent.qnet and training_curve.csv.
    Train,
    /// Run seeded evaluations; writes per-run, summary, and per-round CSVs.
    Evaluate {
        /// Comma-separated subset of direct, utility, seek_focus, deeprl,
        /// oracle; default runs everything the checkpoint allows.
        #[arg(long, value_delimiter = ',', value_name = "NAMES")]
        strategies: Vec<String>,

        /// Trained agent; required by the deeprl strategy.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate across scenario values; writes sweep.csv.
    Sweep {
        /// Scenario axis to vary: devices or range.
        #[arg(long, value_name = "AXIS")]
        axis: String,

        /// Comma-separated axis values, e.g. 30,40,50.
        #[arg(long, value_delimiter = ',', value_name = "VALUES")]
        values: Vec<String>,

        #[arg(long, value_delimiter = ',', value_name = "NAMES")]
        strategies: Vec<String>,

        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
    },
    /// Export a Q-value grid over two input features.
    Qgrid {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,

        /// Feature swept along the first axis.
        #[arg(long, default_value = "s_distance", value_name = "FEATURE")]
        x: String,

        /// Feature swept along the second axis.
        #[arg(long, default_value = "s_one_hop", value_name = "FEATURE")]
        y: String,

        /// Grid points per axis.
        #[arg(long, default_value_t = 50)]
        resolution: usize,

        /// Pin non-axis features, e.g. s_ttl=1.0 (comma-separated); all
        /// others sit at 0.5.
        #[arg(long, value_delimiter = ',', value_name = "NAME=VALUE")]
        fixed: Vec<String>,

        /// Grid destination; default <out-dir>/qgrid.csv.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> hopsim::error::Result<()> {
    let mut config = ExperimentConfig::load(cli.config.as_deref(), &cli.set)?;
    if let Some(dir) = cli.out_dir {
        config.run.out_dir = dir.to_string_lossy().into_owned();
    }
    let out_dir = PathBuf::from(&config.run.out_dir);

    match cli.command {
        Command::GenerateMobility { out } => {
            let out = out.unwrap_or_else(|| out_dir.join("trace.txt"));
            commands::generate_mobility(&config, &out)
        }
        Command::Train => commands::train(&config, &out_dir),
        Command::Evaluate { strategies, checkpoint } => {
            commands::evaluate(&config, &strategies, checkpoint.as_deref(), &out_dir)
        }
        Command::Sweep { axis, values, strategies, checkpoint } => commands::sweep(
            &config,
            axis.parse()?,
            &values,
            &strategies,
            checkpoint.as_deref(),
            &out_dir,
        ),
        Command::Qgrid { checkpoint, x, y, resolution, fixed, out } => {
            let out = out.unwrap_or_else(|| out_dir.join("qgrid.csv"));
            commands::qgrid(&checkpoint, &x, &y, resolution, &fixed, &out)
        }
    }
}

/// Stable exit codes: 2 for configuration and input problems, 3 for I/O,
/// 4 for protocol violations reported by the simulator.
fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::Io(_) => 3,
        Error::Protocol(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("hopsim: {error}");
            ExitCode::from(exit_code_for(&error))
        }
    }
}
