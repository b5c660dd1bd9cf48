use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod output;

use config::RunConfig;

/// Isoscape models, Shapley data valuation and data-selection experiments.
#[derive(Parser)]
#[command(name = "isoshap", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its corruption manifest.
    Generate(Common),
    /// Value every training sample.
    Value(Common),
    /// Run value-guided removal traces and the strategy comparison.
    Select(Common),
    /// Rank agreement between two valuations and per-species summaries.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

/// Error carrying the process exit code: 2 config, 3 data or I/O, 4
/// numerical failure.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: msg.into(),
        }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError::data(msg)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.code {
            2 => "config error",
            4 => "numerical error",
            _ => "data error",
        };
        write!(f, "{kind}: {}", self.message)
    }
}

impl From<isoshap::Error> for CliError {
    fn from(e: isoshap::Error) -> Self {
        use isoshap::Error;
        let code = match e {
            Error::Config(_) => 2,
            Error::Numerical(_) => 4,
            Error::Data(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 3,
        };
        let message = match e {
            Error::Config(m) | Error::Data(m) | Error::Numerical(m) => m,
            other => other.to_string(),
        };
        CliError { code, message }
    }
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Generate(c) => ("generate", c),
        Command::Value(c) => ("value", c),
        Command::Select(c) => ("select", c),
        Command::Report(c) => ("report", c),
    };
    let result = resolve(common).and_then(|cfg| match name {
        "generate" => commands::generate(&cfg),
        "value" => commands::value(&cfg),
        "select" => commands::select(&cfg),
        _ => commands::report(&cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("isoshap: {e}");
            ExitCode::from(e.code)
        }
    }
}
