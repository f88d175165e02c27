use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "specalloc", version, about = "Traffic-driven spectrum allocation over frequency-reuse patterns")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one allocation and write it with its delay and bounds report.
    Allocate(AllocateArgs),
    /// Solve and simulate every scheme over a grid of loads.
    Sweep(SweepArgs),
    /// Alternate spectrum and power updates under per-BTS power budgets.
    Powerctl(PowerArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum SchemeArg {
    Conservative,
    Refined,
    Orthogonal,
    FullReuse,
}

impl SchemeArg {
    pub fn name(self) -> &'static str {
        match self {
            SchemeArg::Conservative => "conservative",
            SchemeArg::Refined => "refined",
            SchemeArg::Orthogonal => "orthogonal",
            SchemeArg::FullReuse => "full-reuse",
        }
    }
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum, default_value = "conservative")]
    pub scheme: SchemeArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate this allocation file instead of solving.
    #[arg(long)]
    pub allocation: Option<PathBuf>,
    /// Solver stationarity tolerance.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated schemes.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "conservative,refined,orthogonal,full-reuse")]
    pub scheme: Vec<SchemeArg>,
    /// Mean arrival rates per BTS (packets/s); the per-BTS mix comes from the config.
    #[arg(long, value_delimiter = ',', required = true)]
    pub loads: Vec<f64>,
    /// Simulation seeds; results are averaged over them.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Simulated events per run; 0 skips simulation.
    #[arg(long, default_value_t = 1_000_000)]
    pub horizon: u64,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct PowerArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `conservative` or `refined`.
    #[arg(long, value_enum, default_value = "conservative")]
    pub scheme: SchemeArg,
    /// Maximum number of allocation solves.
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1_000_000)]
    pub horizon: u64,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}
