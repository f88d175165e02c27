//! Command-line harness: scenario ingestion, single allocations, load sweeps
//! and power-control runs, written as JSON records and CSV tables.
//!
//! Exit codes: 0 success, 1 usage/config/IO error, 2 arrival rates not
//! supportable (outside the throughput region or unstable), 3 numerical
//! failure inside a solver.

pub mod args;
pub mod commands;
pub mod records;

use std::ffi::OsString;
use std::fmt;
use std::path::Path;

use clap::Parser;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

/// Environment variable bounding the sweep worker pool.
pub const WORKERS_ENV: &str = "SPECALLOC_WORKERS";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, message: message.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::usage(format!("{}: {e}", path.display()))
    }

    pub fn csv(path: &Path, e: csv::Error) -> Self {
        Self::usage(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Exit code for a library error.
pub fn classify(e: &specalloc::Error) -> i32 {
    use specalloc::Error::*;
    match e {
        Infeasible { .. } | OrthogonalInfeasible { .. } | Unstable { .. } | NoBandwidth { .. } => EXIT_INFEASIBLE,
        NoConvergence { .. } | Singular(_) | Truncation { .. } => EXIT_SOLVER,
        _ => EXIT_USAGE,
    }
}

impl From<specalloc::Error> for CliError {
    fn from(e: specalloc::Error) -> Self {
        CliError { code: classify(&e), message: e.to_string() }
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let res = match &cli.command {
        args::Command::Allocate(a) => commands::allocate(a),
        args::Command::Sweep(a) => commands::sweep(a),
        args::Command::Powerctl(a) => commands::powerctl(a),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
