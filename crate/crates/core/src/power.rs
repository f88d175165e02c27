//! Alternating spectrum and power updates under a per-BTS total power budget.
//! Each BTS spreads its budget evenly over the bandwidth it is allocated, the
//! efficiency table is rebuilt from the new PSDs, and the allocation is
//! re-solved.

use serde::{Deserialize, Serialize};

use crate::allocation::Allocation;
use crate::conservative::{solve_p1, DelayReport, SolverOptions};
use crate::error::{Error, Result};
use crate::network::{build_table, EfficiencyTable, Scenario};
use crate::refined_opt::solve_p2;
use crate::sim::{simulate, SimOptions};

/// TV change in the allocation below which the alternation has converged.
pub const CONVERGENCE_TV: f64 = 1e-4;
/// TV distance at which an iterate counts as revisiting an earlier one.
pub const CYCLE_TV: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Conservative,
    Refined,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Conservative => "conservative",
            Scheme::Refined => "refined",
        }
    }

    pub fn solve(self, tbl: &EfficiencyTable, lambda: &[f64], opts: &SolverOptions) -> Result<(Allocation, DelayReport)> {
        match self {
            Scheme::Conservative => solve_p1(tbl, lambda, opts).map(|s| (s.allocation, s.report)),
            Scheme::Refined => solve_p2(tbl, lambda, opts).map(|s| (s.allocation, s.report)),
        }
    }
}

/// Budgets (uW) that reproduce the scenario's fixed PSDs over the full band.
pub fn default_budgets(sc: &Scenario) -> Vec<f64> {
    sc.bts.iter().map(|b| b.tx_psd * sc.bandwidth_w).collect()
}

/// Bandwidth (Hz) each BTS transmits on under `x`.
pub fn allocated_bandwidth(x: &Allocation, bandwidth: f64) -> Vec<f64> {
    let mut w = vec![0.0; x.n()];
    for (p, v) in x.nonzero() {
        for i in p.members() {
            w[i] += v * bandwidth;
        }
    }
    w
}

/// PSD per BTS after spreading its budget over its allocated bandwidth. A BTS
/// with no bandwidth and no traffic keeps the full-band PSD.
pub fn concentrated_psd(x: &Allocation, sc: &Scenario, budgets: &[f64]) -> Result<Vec<f64>> {
    let n = sc.n();
    if x.n() != n || budgets.len() != n {
        return Err(Error::Dimension(format!("allocation over {} BTSs, {} budgets, scenario of {n}", x.n(), budgets.len())));
    }
    let w = allocated_bandwidth(x, sc.bandwidth_w);
    (0..n)
        .map(|i| {
            if w[i] > 0.0 {
                Ok(budgets[i] / w[i])
            } else if sc.arrival_rates[i] > 0.0 {
                Err(Error::NoBandwidth { bts: i })
            } else {
                Ok(budgets[i] / sc.bandwidth_w)
            }
        })
        .collect()
}

/// Efficiency table with every BTS concentrating its budget on its share.
pub fn update_efficiencies(x: &Allocation, sc: &Scenario, budgets: &[f64]) -> Result<EfficiencyTable> {
    build_table(&sc.with_psd(&concentrated_psd(x, sc, budgets)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerOptions {
    pub max_iters: usize,
    pub solver: SolverOptions,
    /// Simulate every iterate when set.
    pub sim: Option<SimOptions>,
    /// Defaults to [`default_budgets`].
    pub budgets: Option<Vec<f64>>,
}

impl Default for PowerOptions {
    fn default() -> Self {
        PowerOptions { max_iters: 20, solver: SolverOptions::default(), sim: None, budgets: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerStep {
    pub iteration: usize,
    /// PSDs the table of this iteration was built from.
    pub psd: Vec<f64>,
    pub allocation: Allocation,
    pub report: DelayReport,
    pub simulated: Option<f64>,
    pub simulated_stderr: Option<f64>,
    /// TV distance to the previous iterate's allocation.
    pub change: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scheme: Scheme,
    pub steps: Vec<PowerStep>,
    pub converged: bool,
    /// Index of the earlier iterate the last one came back to.
    pub cycle: Option<usize>,
    /// Why the loop stopped early, if an iterate could not be solved.
    pub failure: Option<String>,
}

/// Index of an iterate before the most recent one that `x` lies within
/// [`CYCLE_TV`] of. The most recent iterate is the convergence test's job.
pub fn revisited(history: &[&Allocation], x: &Allocation) -> Option<usize> {
    let older = history.len().saturating_sub(1);
    history[..older].iter().rposition(|h| h.total_variation(x) < CYCLE_TV)
}

/// Alternates allocation solves and PSD updates, starting from the
/// scenario's own PSDs. Stops on convergence (allocation change below
/// [`CONVERGENCE_TV`] or PSDs left unchanged by the update), a revisited
/// iterate, an unsolvable iterate, or `max_iters` solves.
pub fn alternate(sc: &Scenario, lambda: &[f64], scheme: Scheme, opts: &PowerOptions) -> Result<Trajectory> {
    let budgets = opts.budgets.clone().unwrap_or_else(|| default_budgets(sc));
    let sc = sc.with_arrival_rates(lambda.to_vec());
    sc.validate()?;
    let mut psd: Vec<f64> = sc.bts.iter().map(|b| b.tx_psd).collect();
    let mut tbl = build_table(&sc)?;
    let mut traj = Trajectory { scheme, steps: vec![], converged: false, cycle: None, failure: None };
    for k in 0..opts.max_iters.max(1) {
        let (x, report) = match scheme.solve(&tbl, lambda, &opts.solver) {
            Ok(v) => v,
            Err(e) => {
                traj.failure = Some(format!("iteration {k}: {e}"));
                break;
            }
        };
        let (simulated, simulated_stderr) = match &opts.sim {
            Some(so) => {
                let r = simulate(&x, &tbl, lambda, so)?;
                (r.average, r.average_stderr)
            }
            None => (None, None),
        };
        let change = traj.steps.last().map(|s| s.allocation.total_variation(&x));
        let history: Vec<&Allocation> = traj.steps.iter().map(|s| &s.allocation).collect();
        let cycle = revisited(&history, &x);
        traj.steps.push(PowerStep { iteration: k, psd: psd.clone(), allocation: x.clone(), report, simulated, simulated_stderr, change });
        if change.is_some_and(|c| c < CONVERGENCE_TV) {
            traj.converged = true;
            break;
        }
        if cycle.is_some() {
            traj.cycle = cycle;
            break;
        }
        let next = match concentrated_psd(&x, &sc, &budgets) {
            Ok(p) => p,
            Err(e) => {
                traj.failure = Some(format!("iteration {k}: {e}"));
                break;
            }
        };
        // same PSDs give the same table and so the same allocation
        if next.iter().zip(&psd).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs()) {
            traj.converged = true;
            break;
        }
        psd = next;
        tbl = build_table(&sc.with_psd(&psd))?;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_scenario, ScenarioConfig, TrafficConfig};
    use crate::pattern::ReusePattern;

    fn hex(n: usize, mean: f64) -> Scenario {
        build_scenario(&ScenarioConfig::hex_drop(n, 3, TrafficConfig::ProportionalWorstCase { mean })).unwrap()
    }

    #[test]
    fn full_reuse_reproduces_fixed_table() {
        let sc = hex(4, 5.0);
        let b = default_budgets(&sc);
        let t = update_efficiencies(&Allocation::full_reuse(4), &sc, &b).unwrap();
        let fixed = build_table(&sc).unwrap();
        for p in ReusePattern::all(4) {
            for i in p.members() {
                assert!((t.get(i, p) - fixed.get(i, p)).abs() <= 1e-12 * fixed.get(i, p));
            }
        }
    }

    #[test]
    fn orthogonal_concentrates_power() {
        let sc = hex(3, 5.0);
        let b = default_budgets(&sc);
        let psd = concentrated_psd(&Allocation::uniform_orthogonal(3), &sc, &b).unwrap();
        for (i, p) in psd.iter().enumerate() {
            assert!((p - 3.0 * b[i] / sc.bandwidth_w).abs() < 1e-12);
        }
    }

    #[test]
    fn budgets_conserved_and_self_efficiency_monotone() {
        let sc = hex(3, 5.0);
        let b = default_budgets(&sc);
        let x = Allocation::from_weights(3, &[(ReusePattern(1), 0.2), (ReusePattern(6), 0.5), (ReusePattern(7), 0.3)]).unwrap();
        let psd = concentrated_psd(&x, &sc, &b).unwrap();
        let w = allocated_bandwidth(&x, sc.bandwidth_w);
        for i in 0..3 {
            assert!((psd[i] * w[i] - b[i]).abs() <= 1e-9 * b[i]);
        }
        let fixed = build_table(&sc).unwrap();
        let t = update_efficiencies(&x, &sc, &b).unwrap();
        for i in 0..3 {
            let s = ReusePattern::singleton(i);
            assert!(t.get(i, s) >= fixed.get(i, s));
        }
    }

    #[test]
    fn missing_bandwidth_with_traffic_is_an_error() {
        let sc = hex(2, 5.0);
        let x = Allocation::from_weights(2, &[(ReusePattern(1), 1.0)]).unwrap();
        assert!(matches!(update_efficiencies(&x, &sc, &default_budgets(&sc)), Err(Error::NoBandwidth { bts: 1 })));
    }

    #[test]
    fn revisits_are_detected_past_the_last_iterate() {
        let a = Allocation::full_reuse(2);
        let b = Allocation::uniform_orthogonal(2);
        let c = Allocation::from_weights(2, &[(ReusePattern(1), 1.0), (ReusePattern(3), 1.0)]).unwrap();
        assert_eq!(revisited(&[&a, &b], &a), Some(0));
        assert_eq!(revisited(&[&a, &b], &b), None);
        assert_eq!(revisited(&[&a, &b, &c, &b], &a), Some(0));
        assert_eq!(revisited(&[&a, &b, &c, &a], &b), Some(1));
        assert_eq!(revisited(&[], &a), None);
    }

    #[test]
    fn single_bts_is_a_fixed_point() {
        let sc = hex(1, 5.0);
        let traj = alternate(&sc, &sc.arrival_rates.clone(), Scheme::Conservative, &PowerOptions::default()).unwrap();
        assert!(traj.converged);
        assert_eq!(traj.steps.len(), 1);
    }
}
