//! Command line front end and HTTP service for the reasoning engine.
//!
//! [`run`] parses arguments and dispatches a subcommand. It maps outcomes to
//! exit codes: 0 success, 1 usage error, 2 runtime failure.

pub mod commands;
pub mod config;
pub mod service;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use chronoreason::engine::ClockSpec;
use config::{ApproverKind, BackendKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "chronoreason", version, about = "Temporal graph-of-reasons runs, cases, metrics and review service")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for strategy choices and run ids.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// `real` or `step:<ms>`.
    #[arg(long, global = true, value_parser = parse_clock)]
    pub clock: Option<ClockSpec>,
    /// Script file for the scripted backend.
    #[arg(long, global = true, value_name = "FILE")]
    pub script: Option<PathBuf>,
    /// Run store directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub store: Option<PathBuf>,
    /// Knowledge corpus (JSON Lines documents).
    #[arg(long, global = true, value_name = "FILE")]
    pub corpus: Option<PathBuf>,
    /// Agent roster (JSON Lines).
    #[arg(long, global = true, value_name = "FILE")]
    pub roster: Option<PathBuf>,
}

fn parse_clock(s: &str) -> Result<ClockSpec, String> {
    s.parse()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Json,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ChartFormat {
    Svg,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DiffFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Only runs tagged with this period.
    #[arg(long)]
    pub period: Option<String>,
    /// Comma separated subset of dataset, focus, modality, period.
    #[arg(long, value_name = "FIELDS")]
    pub group_by: Option<String>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: ReportFormat,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate, deduplicate and optionally split a problem file.
    Curate {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Curated problems (the reasoning set when splitting).
        #[arg(long, value_name = "FILE")]
        output: PathBuf,
        /// Ask the backend for severities and open-ended rewrites.
        #[arg(long)]
        rewrite: bool,
        /// Reasoning-set fraction; the rest goes to --training.
        #[arg(long, requires = "training", conflicts_with = "split_ids")]
        split_fraction: Option<f64>,
        /// Reasoning-set problem ids, comma separated.
        #[arg(long, requires = "training", value_delimiter = ',')]
        split_ids: Option<Vec<String>>,
        #[arg(long, value_name = "FILE")]
        training: Option<PathBuf>,
    },
    /// Run the reasoning engine over problems and persist the runs.
    Run {
        #[arg(long, value_name = "FILE")]
        problems: PathBuf,
        /// Only these problem ids (repeatable or comma separated).
        #[arg(long = "only", value_name = "ID", value_delimiter = ',')]
        only: Vec<String>,
        /// Tag every run with this period instead of the problem's own.
        #[arg(long)]
        period: Option<String>,
    },
    /// Run the full multi-agent case pipeline.
    Case {
        #[arg(long, value_name = "FILE")]
        cases: PathBuf,
        #[arg(long = "only", value_name = "ID", value_delimiter = ',')]
        only: Vec<String>,
        #[arg(long)]
        period: Option<String>,
        #[arg(long, value_enum, default_value = "auto")]
        approver: ApproverKind,
    },
    /// Run problems, persist them and report on exactly those runs.
    Bench {
        #[arg(long, value_name = "FILE")]
        problems: PathBuf,
        #[arg(long = "tag-period", value_name = "PERIOD")]
        tag_period: Option<String>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Aggregate the stored runs (or an archived period).
    Report {
        /// Read this archived period instead of the live store.
        #[arg(long, value_name = "PERIOD")]
        archive: Option<String>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Write chart series as SVG or CSV files.
    Chart {
        #[arg(long = "kind", value_name = "KIND", value_delimiter = ',')]
        kinds: Vec<String>,
        #[arg(long, value_enum, default_value = "svg")]
        format: ChartFormat,
        #[arg(long, value_name = "DIR", default_value = "charts")]
        out: PathBuf,
        #[arg(long)]
        period: Option<String>,
    },
    /// Score model outputs with the format and accuracy rewards.
    ScoreRewards {
        /// JSON Lines with raw_output and ground_truth.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Field whose value groups records for relative advantages.
        #[arg(long, value_name = "FIELD")]
        group_key: Option<String>,
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Serve the /v1 HTTP API.
    Serve {
        #[arg(long, value_name = "ADDR")]
        bind: Option<String>,
        #[arg(long, value_enum)]
        approver: Option<ApproverKind>,
    },
    /// Re-execute a stored run and print its serialized graph.
    Replay {
        #[arg(long, value_name = "ID")]
        run_id: String,
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
    /// Seal every stored run of a period into an archive.
    Archive {
        #[arg(long)]
        period: String,
    },
    /// Compare two archived periods case by case.
    DiffPeriods {
        #[arg(long, value_name = "PERIOD")]
        from: String,
        #[arg(long, value_name = "PERIOD")]
        to: String,
        #[arg(long, value_enum, default_value = "text")]
        format: DiffFormat,
    },
}

/// A failure that is the caller's fault rather than the system's.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            if e.downcast_ref::<UsageError>().is_some() {
                eprintln!("error: {e:#}");
                eprintln!("\nRun with --help for usage.");
                EXIT_USAGE
            } else {
                eprintln!("error: {e:#}");
                EXIT_RUNTIME
            }
        }
    }
}
