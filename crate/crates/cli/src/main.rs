//! `qbtc`: batch driver for the simulator.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or config error,
//! 3 unreadable or malformed input, 4 coin rejected, 5 mint failed,
//! 6 replay differs from its manifest.

mod coinfile;
mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "qbtc",
    version,
    about = "Desk-scale simulator of quantum money on a proof-of-work chain"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// Flags shared by every subcommand. Protocol flags override the config
/// file, which overrides the defaults.
#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` protocol config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "qbtc-out")]
    pub out_dir: PathBuf,
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true)]
    pub m: Option<usize>,
    #[arg(long, global = true)]
    pub t_max: Option<u64>,
    #[arg(long, global = true)]
    pub t_block: Option<u64>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Attacker share of the hash power.
    #[arg(long, global = true)]
    pub p: Option<f64>,
    #[arg(long, global = true)]
    pub trials: Option<u64>,
    #[arg(long, global = true)]
    pub rounds: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mine shards, combine them into coins and export everything.
    Mint {
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Verify an exported coin against a chain file.
    Verify {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        coin: PathBuf,
        /// Defaults to `registry.jsonl` next to the chain file.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Run honest miners and record the event log.
    Simulate {
        #[arg(long, default_value_t = 1)]
        miners: usize,
        #[arg(long, default_value_t = 60_000)]
        duration: u64,
        /// Stop once the chain reaches this height.
        #[arg(long)]
        blocks: Option<u64>,
        #[arg(long, default_value_t = 0)]
        delay: u64,
        #[arg(long, default_value_t = 1)]
        hashes_per_tick: u64,
        /// Expected ticks per block at the starting difficulty; defaults to t_block.
        #[arg(long)]
        block_ticks: Option<u64>,
        /// Blocks per difficulty adjustment; 0 keeps it fixed.
        #[arg(long, default_value_t = 32)]
        retarget_interval: u64,
        /// Mine empty blocks only.
        #[arg(long)]
        no_mint: bool,
    },
    /// Monte Carlo of the shard-reuse attack against its analytic bound.
    Attack {
        /// Shard wins needed in the first window; defaults to m - 2.
        #[arg(long)]
        wins_needed: Option<u64>,
        /// Also write the event trace of the first N trials.
        #[arg(long)]
        trace: Option<u64>,
    },
    /// Tabulate the reuse-attack probability and bound over a grid.
    Bound {
        #[arg(long, value_delimiter = ',', default_value = "10,20,40")]
        ks: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,1.0")]
        gammas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.15")]
        ps: Vec<f64>,
    },
    /// Repeatedly verify and recover a coin, tracking trace distance.
    Longevity {
        #[arg(long, value_enum, default_value_t = LongevityModeArg::Postselect)]
        mode: LongevityModeArg,
        /// Cumulative distance at which the coin counts as worn out.
        #[arg(long, default_value_t = 1.0)]
        wear_out: f64,
    },
    /// Summarize a coin file and/or a chain file.
    Inspect {
        #[arg(long)]
        coin: Option<PathBuf>,
        #[arg(long)]
        chain: Option<PathBuf>,
        /// Print shard amplitudes as JSON lines.
        #[arg(long)]
        states: bool,
    },
    /// Convert a chain log to JSON lines, or back with `--from-jsonl`.
    DumpChain {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        from_jsonl: bool,
    },
    /// Re-run a command from its manifest and compare the outputs.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LongevityModeArg {
    Postselect,
    Sample,
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli, &raw) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qbtc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
