use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

mod commands;
mod config;
mod error;

use error::CliError;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (unknown flag, bad argument)
  3  config error (unreadable or malformed config, override of the wrong type)
  4  invalid parameters or data (rejected by validation)
  5  numerical failure (root-find or reference run did not converge)
  6  I/O error (reading data files or writing artifacts)";

/// Decentralized conformal prediction simulator.
#[derive(Debug, Parser)]
#[command(name = "dcp", version, after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file (a manifest from an earlier run is also accepted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, env = "DCP_OUT", default_value = "dcp-out")]
    out: PathBuf,
    /// Override a config key; dotted keys reach nested fields. Repeatable, last wins.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, value_parser = config::parse_override)]
    overrides: Vec<(String, Value)>,
    /// Data seed for single runs, base seed for sweeps.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Record the Q-DCP trajectory every N iterations.
    #[arg(long, global = true)]
    log_every: Option<usize>,
    /// Clip out-of-range scores in score files instead of rejecting them.
    #[arg(long, global = true)]
    clip: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic calibration and test score files.
    GenData,
    /// Run Q-DCP once and evaluate its prediction sets.
    RunQdcp,
    /// Run H-DCP once and evaluate its prediction sets.
    RunHdcp,
    /// Evaluate split CP and FCP on pooled scores.
    RunCentral,
    /// Multi-trial sweep over methods, topologies and parameter grids.
    Sweep,
    /// Print a topology's size, degrees and spectral summary.
    InspectGraph(commands::GraphArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::RunQdcp => "run-qdcp",
            Command::RunHdcp => "run-hdcp",
            Command::RunCentral => "run-central",
            Command::Sweep => "sweep",
            Command::InspectGraph(_) => "inspect-graph",
        }
    }
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Output {
        path: dir.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    create_out(&c.out)?;
    let ctx = commands::Context {
        name: cli.command.name(),
        config: c.config.as_deref(),
        out: &c.out,
        overrides: &c.overrides,
        seed: c.seed,
        jobs: c.jobs,
        log_every: c.log_every,
        clip: c.clip,
    };
    match &cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::RunQdcp => commands::run_qdcp(&ctx),
        Command::RunHdcp => commands::run_hdcp(&ctx),
        Command::RunCentral => commands::run_central(&ctx),
        Command::Sweep => commands::sweep(&ctx),
        Command::InspectGraph(args) => commands::inspect_graph(&ctx, args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dcp: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
