//! `archpost`: operator CLI for the generative postcard pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Usage errors
//! print help to stderr; logs go to stderr, data to stdout.

mod commands;
mod config;

use std::path::PathBuf;

use archpost_core::pipeline::SchemaId;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::config::AppConfig;

const DEFAULT_CONFIG_FILE: &str = "archpost.toml";

#[derive(Parser)]
#[command(
    name = "archpost",
    version,
    about = "Unattended generative postcard pipeline: pools, batches, daemon, reports"
)]
struct Cli {
    /// Config file (TOML). Defaults to ./archpost.toml when present.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Keyphrase pool management
    Seeds {
        #[command(subcommand)]
        cmd: SeedsCmd,
    },
    /// Generate postcard items
    Run {
        #[command(subcommand)]
        cmd: RunCmd,
    },
    /// Scheduler loop plus publishers, until interrupted
    Daemon,
    /// Score items and compare schemas
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// Reaction ingestion and conversion reports
    Engage {
        #[command(subcommand)]
        cmd: EngageCmd,
    },
    /// Schedule diagnostics
    Sched {
        #[command(subcommand)]
        cmd: SchedCmd,
    },
}

fn parse_schema(s: &str) -> Result<SchemaId, String> {
    s.parse()
}

#[derive(Subcommand)]
enum SeedsCmd {
    /// Import seed keyphrases (one per line, # comments ignored)
    Import { file: PathBuf },
    /// Grow the pool through the expansion backend
    Expand {
        #[arg(long, default_value_t = 408)]
        target: usize,
    },
}

#[derive(Subcommand)]
enum RunCmd {
    /// Run a single item end to end
    Item {
        #[arg(long, value_parser = parse_schema, default_value = "our_schema")]
        schema: SchemaId,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a batch of independent items
    Batch {
        #[arg(long, value_parser = parse_schema, default_value = "our_schema")]
        schema: SchemaId,
        #[arg(short = 'n', long = "count", value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Score journaled items of one schema
    Score {
        #[arg(long, value_parser = parse_schema)]
        schema: SchemaId,
    },
    /// Render the cross-schema comparison table
    Compare {
        /// Also write the table as CSV
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EngageCmd {
    /// Ingest a JSON Lines reaction export
    Import { file: PathBuf },
    /// Per-keyphrase conversion rates
    Report {
        #[arg(long, default_value_t = 20)]
        min_support: u64,
        /// Also write the rows as CSV
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SchedCmd {
    /// Monte Carlo the daily publication count
    Simulate {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        days: u64,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    // die quietly when stdout is a closed pipe (e.g. `archpost ... | head`)
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(run());
}

fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };

    let config_path = cli.config.clone().or_else(|| {
        let default = PathBuf::from(DEFAULT_CONFIG_FILE);
        default.exists().then_some(default)
    });
    let config = match AppConfig::load(config_path.as_deref()) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };

    let outcome = match cli.command {
        Command::Seeds { cmd } => match cmd {
            SeedsCmd::Import { file } => commands::seeds_import(&config, file),
            SeedsCmd::Expand { target } => commands::seeds_expand(&config, target),
        },
        Command::Run { cmd } => match cmd {
            RunCmd::Item { schema, seed } => commands::run_one_item(&config, schema, seed),
            RunCmd::Batch {
                schema,
                count,
                seed,
            } => commands::run_batch_cmd(&config, schema, count as usize, seed),
        },
        Command::Daemon => commands::daemon(&config),
        Command::Eval { cmd } => match cmd {
            EvalCmd::Score { schema } => commands::eval_score(&config, schema),
            EvalCmd::Compare { csv } => commands::eval_compare(&config, csv),
        },
        Command::Engage { cmd } => match cmd {
            EngageCmd::Import { file } => commands::engage_import(&config, file),
            EngageCmd::Report { min_support, csv } => {
                commands::engage_report(&config, min_support, csv)
            }
        },
        Command::Sched { cmd } => match cmd {
            SchedCmd::Simulate { days, seed } => commands::sched_simulate(&config, days, seed),
        },
    };

    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}
