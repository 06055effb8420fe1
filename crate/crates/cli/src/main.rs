mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deltamask::sim::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid input {path}: {message}")]
    Input { path: String, message: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Sim(SimError),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 for anything the caller can fix in their invocation, 1 for
    /// failures at run time.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) | CliError::Input { .. } => 2,
            CliError::Sim(SimError::Config(_) | SimError::TooFewSamples { .. }) => 2,
            CliError::Io { .. } | CliError::Sim(_) | CliError::Failed(_) => 1,
        }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => CliError::Config {
                key: c.key,
                message: c.message,
            },
            other => CliError::Sim(other),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "deltamask",
    version,
    about = "Federated mask fine-tuning with filter-compressed mask deltas"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long, env = "DELTAMASK_OUT", default_value = "deltamask-out")]
    pub out: PathBuf,
    /// `key=value` overrides applied after the file, e.g. `rounds=5` or
    /// `codec.bits_per_entry=16`.
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LayoutArg {
    BinaryFuse,
    Xor,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ThetaArg {
    /// Independent uniform draws per client and weight.
    Random,
    /// Every probability 0.5, where the bound is tight.
    Half,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a federated experiment and write metrics.csv, summary.json,
    /// checkpoint.dmg and the resolved config.toml.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Print the resolved config and exit without running.
        #[arg(long)]
        dry_run: bool,
        /// Also write every client transmission under updates/.
        #[arg(long)]
        dump_updates: bool,
    },
    /// Time filter construction and queries and measure space and FPR.
    BenchFilter {
        #[arg(long, default_value_t = 1_000_000, value_parser = clap::value_parser!(u64).range(1..))]
        keys: u64,
        #[arg(long, default_value_t = 8)]
        bpe: u8,
        #[arg(long, default_value_t = 4)]
        arity: u8,
        #[arg(long, value_enum, default_value = "binary-fuse")]
        layout: LayoutArg,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
        repetitions: u64,
        /// Non-member queries for the FPR estimate.
        #[arg(long, default_value_t = 1_000_000, value_parser = clap::value_parser!(u64).range(1..))]
        probes: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Monte Carlo check of the d/4K mean-estimation error bound.
    VerifyBound {
        #[arg(short = 'd', long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
        dim: u64,
        /// Number of clients K.
        #[arg(short = 'k', long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
        clients: u64,
        #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
        /// Flip each received bit with probability 2^-bpe.
        #[arg(long)]
        bpe: Option<u32>,
        #[arg(long, value_enum, default_value = "random")]
        theta: ThetaArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write the fingerprint array of an encoded update as a grayscale PNG.
    ExportPng {
        /// A DMU1 update file, as written by `run --dump-updates`.
        update: PathBuf,
        /// Defaults to the input path with a .png extension.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Write the configured train and test sets as CSV.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        match cli.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("DELTAMASK_LOG")
        .init();
    let result = match cli.command {
        Command::Run {
            config,
            dry_run,
            dump_updates,
        } => commands::run(&config, dry_run, dump_updates),
        Command::BenchFilter {
            keys,
            bpe,
            arity,
            layout,
            repetitions,
            probes,
            seed,
        } => commands::bench_filter(commands::BenchArgs {
            keys: keys as usize,
            bpe,
            arity,
            layout,
            repetitions: repetitions as usize,
            probes: probes as usize,
            seed,
        }),
        Command::VerifyBound {
            dim,
            clients,
            trials,
            bpe,
            theta,
            seed,
        } => commands::verify_bound(
            dim as usize,
            clients as usize,
            trials as usize,
            bpe,
            theta,
            seed,
        ),
        Command::ExportPng { update, out } => commands::export_png(&update, out),
        Command::GenData { config } => commands::gen_data(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
