//! `robust-ecm` command-line front end.
//!
//! Exit codes: 0 success, 1 error, 2 synthesis failed (hard samples written).

mod commands;
mod spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "robust-ecm", version, about = "Perception-robust controller synthesis and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command. Flags override values from `--config`.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run specification.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// dubins, cartpole or lanekeep.
    #[arg(long)]
    pub benchmark: Option<String>,
    /// adaptive, uniform or nogp.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (0: all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the adaptive synthesis loop and save the resulting artifacts.
    Synthesize {
        #[command(flatten)]
        common: Common,
    },
    /// Unsafe ratio of a saved controller on the critical initial set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory written by `synthesize` (defaults to `--out`).
        #[arg(long)]
        run: Option<PathBuf>,
        /// Evaluate the zero controller instead of a saved one.
        #[arg(long)]
        zero_control: bool,
    },
    /// Synthesis and evaluation over strategies, sample budgets and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated increasing sample budgets.
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<usize>,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// 2D histograms of the actual states in perception datasets.
    Density {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV files.
        #[arg(required = true)]
        datasets: Vec<PathBuf>,
        /// Two state dimensions, e.g. `0,1`.
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
}

fn main() -> ExitCode {
    // clap's default exit code for usage errors is 2, which is reserved here.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synthesize { common } => commands::synthesize(&common),
        Command::Evaluate { common, run, zero_control } => commands::evaluate(&common, run, zero_control),
        Command::Sweep { common, budgets, seeds } => commands::sweep(&common, budgets, seeds),
        Command::Density { common, datasets, dims, bins } => commands::density(&common, &datasets, &dims, bins),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
