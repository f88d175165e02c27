pub mod allocation;
pub mod bounds;
pub mod baselines;
pub mod conservative;
pub mod error;
pub mod lp;
pub mod network;
pub mod pattern;
pub mod power;
pub mod refined;
pub mod refined_opt;
pub mod sim;

pub use allocation::Allocation;
pub use conservative::{algorithm1, solve_p1, DelayReport, SolverOptions};
pub use error::{Error, Result};
pub use network::{build_scenario, build_table, EfficiencyTable, Scenario, ScenarioConfig};
pub use pattern::ReusePattern;
