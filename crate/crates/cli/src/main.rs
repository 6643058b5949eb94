//! `dmubf`: moments, analytic SINR, Monte Carlo sweeps and dataset analysis.
//!
//! Exit status: 0 success, 1 other failure, 2 usage, 3 I/O, 4 config parse,
//! 5 config validation, 6 malformed data, 7 numerical failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::commands::{Ctx, Report};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "dmubf",
    version,
    about = "Distributed MU-MIMO uplink under per-dAP CFO"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory; every file the run writes goes here.
    #[arg(long, short, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0: one per core).
    #[arg(long, global = true, env = "DMUBF_THREADS")]
    threads: Option<usize>,

    /// Validate the config and write the manifest without computing anything.
    #[arg(long, global = true)]
    dry_run: bool,

    /// Progress on stderr.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form and Monte Carlo moments of the CFO gain.
    Moments(ConfigArg),
    /// Conditional SINR on one channel realization.
    AnalyticSinr(ConfigArg),
    /// Monte Carlo SINR and EVM sweep.
    Simulate(ConfigArg),
    /// Over-the-air captures.
    #[command(subcommand)]
    Dataset(DatasetCommand),
}

#[derive(Debug, Subcommand)]
enum DatasetCommand {
    /// CFO estimates, inter-dAP statistics and EVM-SNR of a capture.
    Analyze {
        #[command(flatten)]
        config: ConfigArg,
        /// Capture file; overrides `input` in the config.
        #[arg(long, short)]
        input: Option<PathBuf>,
    },
    /// Writes a synthetic capture in the dataset layout.
    Synth(ConfigArg),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Moments(_) => "moments",
            Command::AnalyticSinr(_) => "analytic-sinr",
            Command::Simulate(_) => "simulate",
            Command::Dataset(DatasetCommand::Analyze { .. }) => "dataset analyze",
            Command::Dataset(DatasetCommand::Synth(_)) => "dataset synth",
        }
    }

    fn config_path(&self) -> Option<PathBuf> {
        match self {
            Command::Moments(c)
            | Command::AnalyticSinr(c)
            | Command::Simulate(c)
            | Command::Dataset(DatasetCommand::Synth(c))
            | Command::Dataset(DatasetCommand::Analyze { config: c, .. }) => c.config.clone(),
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let threads = cli.threads.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Other(format!("thread pool: {e}")))?;
    let ctx = Ctx {
        config_path: cli.command.config_path(),
        out: cli.out.clone(),
        seed: cli.seed,
        verbose: cli.verbose,
        dry_run: cli.dry_run,
    };
    let name = cli.command.name();
    commands::ensure_out_dir(&ctx.out)?;
    let start = Instant::now();
    let report: Report = match cli.command {
        Command::Moments(_) => commands::moments(&ctx)?,
        Command::AnalyticSinr(_) => commands::analytic_sinr(&ctx)?,
        Command::Simulate(_) => commands::simulate(&ctx)?,
        Command::Dataset(DatasetCommand::Analyze { input, .. }) => {
            commands::dataset_analyze(&ctx, input)?
        }
        Command::Dataset(DatasetCommand::Synth(_)) => commands::dataset_synth(&ctx)?,
    };
    let wall = start.elapsed().as_secs_f64();

    let mut manifest = json!({
        "tool": "dmubf",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": name,
        "dry_run": ctx.dry_run,
        "config_file": ctx.config_path,
        "seed": report.seed,
        "threads": rayon::current_num_threads(),
        "wall_time_s": wall,
        "outputs": report.outputs,
        "resolved_config": report.resolved,
    });
    if let Value::Object(obj) = &mut manifest {
        obj.extend(report.extra);
    }
    let path = ctx.out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Other(format!("manifest: {e}")))?;
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    if ctx.verbose > 0 {
        eprintln!("done in {wall:.2} s; wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
