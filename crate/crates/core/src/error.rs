use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("network of {n} BTSs exceeds the cap of {cap}: the pattern space has exponential size 2^n")]
    ExponentialSize { n: usize, cap: usize },

    #[error("BTS {bts} is not a member of pattern {pattern}")]
    NotInPattern { bts: usize, pattern: String },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("efficiency table invariant violated: {0}")]
    TableInvariant(String),

    #[error("allocation is not on the simplex: {0}")]
    InvalidAllocation(String),

    #[error("cell {cell} is unstable: service rate {rate} does not exceed arrival rate {arrival}")]
    Unstable { cell: usize, rate: f64, arrival: f64 },

    /// The arrival vector lies outside the throughput region; `margin` is the
    /// largest factor by which it could be scaled and remain supportable.
    #[error("arrival rates outside the throughput region (throughput margin {margin:.6})")]
    Infeasible { margin: f64 },

    #[error("orthogonal allocation infeasible: sum of lambda_i / s_i,{{i}} = {load:.6} >= 1")]
    OrthogonalInfeasible { load: f64 },

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("truncation mass {mass:.3e} too large for queue cap {cap}; raise the cap")]
    Truncation { mass: f64, cap: usize },

    #[error("simulation horizon {horizon} does not exceed warmup {warmup}")]
    Horizon { horizon: u64, warmup: u64 },

    #[error("BTS {bts} has traffic but no allocated bandwidth")]
    NoBandwidth { bts: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
