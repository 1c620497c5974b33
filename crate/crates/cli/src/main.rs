//! `fliqs`: quantization search, uniform baselines, sweeps, analyses and
//! cost reports.
//!
//! Exit status is 0 on success, 2 for invalid configuration or usage and 1
//! for runtime failures.

mod commands;
mod overrides;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{AnalyzeKind, Ctx, SweepKind};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "fliqs", version, about = "One-shot mixed-precision quantization search")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Output root; defaults to $FLIQS_OUT, then ./runs.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Config override `dotted.key=value` (value parsed as JSON, else a string).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Joint weight training and format search.
    Search {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train with one format in every searchable layer.
    Uniform {
        config: PathBuf,
        /// Format for every searchable layer; defaults to the single format of the search space.
        #[arg(long)]
        format: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// One run per cost target or format, and per seed.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Switching-error, clipping or entropy analysis.
    Analyze {
        #[arg(value_enum)]
        kind: AnalyzeKind,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Search trace for the entropy analysis.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// BOPs of a model manifest under a format assignment.
    Cost {
        /// Bundled manifest name (resnet18, mobilenetv2) or a manifest path.
        #[arg(long)]
        manifest: String,
        #[arg(long, conflicts_with = "assignment")]
        uniform: Option<String>,
        /// JSON `{"default": FORMAT, "layers": {NAME: FORMAT | CHOICE}}`.
        #[arg(long)]
        assignment: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Describe the served model of a run directory.
    ServeInfo {
        run_dir: PathBuf,
        /// Re-evaluate on the run's validation split.
        #[arg(long)]
        evaluate: bool,
        #[arg(long)]
        json: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = Ctx {
        out_root: rundir::output_root(cli.out.as_deref()),
    };
    let dir = match cli.command {
        Command::Search { config, overrides } => commands::search(&ctx, &config, &overrides.set, overrides.seed)?,
        Command::Uniform {
            config,
            format,
            overrides,
        } => commands::uniform(&ctx, &config, format.as_deref(), &overrides.set, overrides.seed)?,
        Command::Sweep {
            kind,
            config,
            overrides,
            jobs,
        } => commands::sweep(&ctx, kind, &config, &overrides.set, overrides.seed, jobs)?,
        Command::Analyze {
            kind,
            config,
            trace,
            overrides,
        } => commands::analyze(&ctx, kind, config.as_deref(), trace.as_deref(), &overrides.set, overrides.seed)?,
        Command::Cost {
            manifest,
            uniform,
            assignment,
            json,
        } => return commands::cost(&manifest, uniform.as_deref(), assignment.as_deref(), json),
        Command::ServeInfo { run_dir, evaluate, json } => return commands::serve_info(&run_dir, evaluate, json),
    };
    println!("{}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fliqs: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
