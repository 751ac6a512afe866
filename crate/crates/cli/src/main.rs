//! `tcsim`: base, fixed-toll, optimized-toll and comparison runs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "tcsim", version, about = "Tradable credit scheme simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment.
    Run(RunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// No toll: day-to-day learning only.
    Base,
    /// A fixed toll profile under the credit scheme.
    Toll,
    /// Search the Gaussian toll shape with Bayesian optimization.
    Bo,
    /// Side-by-side summary of completed run directories.
    Compare,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub mode: Mode,
    /// Run directories to compare (compare mode only).
    pub dirs: Vec<PathBuf>,
    /// Scenario TOML; built-in desk scenario when omitted.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub days: Option<usize>,
    /// Toll profile CSV (bin_start_min, credits_per_meter), 288 rows.
    #[arg(long, conflicts_with = "params")]
    pub toll_file: Option<PathBuf>,
    /// Gaussian toll "A,mu,sigma"; mu in minutes of day or HH:MM.
    #[arg(long, allow_hyphen_values = true)]
    pub params: Option<String>,
    /// Minimum expected selling profit, $.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Optimizer iterations after the initial design.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub replications: usize,
    /// Also write transactions.csv, including allocations.
    #[arg(long)]
    pub emit_transactions: bool,
}

/// Parse "A,mu,sigma" with mu as minutes or HH:MM.
pub fn parse_toll_params(text: &str) -> Result<tcs_core::TollParams> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("--params expects A,mu,sigma, got {text:?}");
    }
    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>().with_context(|| format!("--params: bad {what} {s:?}"))
    };
    let mean = match parts[1].split_once(':') {
        Some((h, m)) => {
            let h: u32 = h.parse().map_err(|_| anyhow!("--params: bad hour in {:?}", parts[1]))?;
            let m: u32 = m.parse().map_err(|_| anyhow!("--params: bad minute in {:?}", parts[1]))?;
            if m >= 60 {
                bail!("--params: minute out of range in {:?}", parts[1]);
            }
            f64::from(h * 60 + m)
        }
        None => num(parts[1], "mean")?,
    };
    let params = tcs_core::TollParams {
        amplitude: num(parts[0], "amplitude")?,
        mean,
        std: num(parts[2], "std")?,
    };
    params.validate()?;
    Ok(params)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{}", first.trim());
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Run(args) => commands::run(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
