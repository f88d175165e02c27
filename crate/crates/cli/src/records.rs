//! On-disk formats. JSON records carry a `schema` field; CSV files start
//! with a `#schema=` line followed by a header row.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use specalloc::bounds::BoundsReport;
use specalloc::{Allocation, DelayReport};

use crate::CliError;

pub const ALLOCATION_SCHEMA: &str = "specalloc.allocation/1";
pub const REPORT_SCHEMA: &str = "specalloc.report/1";
pub const SWEEP_SCHEMA: &str = "specalloc.sweep/1";
pub const CELLS_SCHEMA: &str = "specalloc.sweep-cells/1";
pub const CDF_SCHEMA: &str = "specalloc.queue-cdf/1";
pub const TRAJECTORY_SCHEMA: &str = "specalloc.trajectory/1";

#[derive(Debug, Serialize, Deserialize)]
pub struct AllocationFile {
    pub schema: String,
    pub scheme: String,
    pub allocation: Allocation,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct SolverInfo {
    pub objective: f64,
    pub kkt_residual: Option<f64>,
    pub iterations: Option<usize>,
    /// Fraction of restarts that agree on the optimum.
    pub agreement: Option<f64>,
    pub stalled: Option<bool>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Evaluation {
    pub conservative: DelayReport,
    /// Absent above the lumped-chain size cap.
    pub refined: Option<DelayReport>,
    pub bounds: Option<BoundsReport>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema: String,
    pub scheme: String,
    pub lambda: Vec<f64>,
    /// `None` when there is no traffic.
    pub throughput_margin: Option<f64>,
    /// One-based member lists of the patterns above the zero threshold.
    pub support: Vec<String>,
    pub evaluation: Evaluation,
    /// Absent when the allocation was read from a file.
    pub solver: Option<SolverInfo>,
}

pub fn read_allocation(path: &Path) -> Result<AllocationFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let rec: AllocationFile =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if rec.schema != ALLOCATION_SCHEMA {
        return Err(CliError::usage(format!(
            "{}: schema `{}`, expected `{ALLOCATION_SCHEMA}`",
            path.display(),
            rec.schema
        )));
    }
    Ok(rec)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::usage(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn csv_writer(path: &Path, schema: &str, header: &[&str]) -> Result<csv::Writer<File>, CliError> {
    let mut f = File::create(path).map_err(|e| CliError::io(path, e))?;
    writeln!(f, "#schema={schema}").map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(header).map_err(|e| CliError::csv(path, e))?;
    Ok(w)
}

/// Shortest round-trip text; empty for missing values.
pub fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
