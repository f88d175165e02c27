//! Reference allocations and throughput-region tooling.

use crate::allocation::Allocation;
use crate::conservative::{check_lambda, conservative_delay, solve_restricted, DelayReport, SolverOptions};
use crate::error::{Error, Result};
use crate::lp::supports_rates;
use crate::network::EfficiencyTable;
use crate::pattern::ReusePattern;

/// Bisection tolerance on the throughput margin.
pub const MARGIN_TOL: f64 = 1e-6;

pub fn full_reuse(n: usize) -> Allocation {
    Allocation::full_reuse(n)
}

/// `sum_i lambda_i / s[i, {i}]`: the share of the band an orthogonal split
/// needs just to match the arrival rates. Orthogonal allocations are stable
/// iff this is below one.
pub fn orthogonal_load(tbl: &EfficiencyTable, lambda: &[f64]) -> f64 {
    lambda
        .iter()
        .enumerate()
        .filter(|(_, l)| **l > 0.0)
        .map(|(i, l)| {
            let s = tbl.get(i, ReusePattern::singleton(i));
            if s > 0.0 {
                l / s
            } else {
                f64::INFINITY
            }
        })
        .sum()
}

/// Best allocation among those using only exclusive (singleton) patterns.
pub fn solve_orthogonal(
    tbl: &EfficiencyTable,
    lambda: &[f64],
    opts: &SolverOptions,
) -> Result<(Allocation, DelayReport)> {
    check_lambda(tbl, lambda)?;
    let n = tbl.n();
    let load = orthogonal_load(tbl, lambda);
    if load >= 1.0 {
        return Err(Error::OrthogonalInfeasible { load });
    }
    // start: each cell gets its demand plus an equal share of the slack
    let slack = (1.0 - load) / n as f64;
    let weights: Vec<(ReusePattern, f64)> = (0..n)
        .map(|i| {
            let s = tbl.get(i, ReusePattern::singleton(i));
            (ReusePattern::singleton(i), lambda[i] / s + slack)
        })
        .collect();
    let start = Allocation::from_weights(n, &weights)?;
    let singles: Vec<ReusePattern> = (0..n).map(ReusePattern::singleton).collect();
    let sol = solve_restricted(tbl, lambda, &singles, &start, opts)?;
    let report = conservative_delay(&sol.allocation, tbl, lambda)?;
    Ok((sol.allocation, report))
}

/// Largest `rho` with `rho * lambda` inside the throughput region, by
/// bisection on phase-1 feasibility. `+inf` when `lambda = 0`.
pub fn throughput_margin(tbl: &EfficiencyTable, lambda: &[f64]) -> f64 {
    let n = tbl.n();
    let busy: Vec<usize> = (0..n).filter(|&i| lambda[i] > 0.0).collect();
    if busy.is_empty() {
        return f64::INFINITY;
    }
    // no allocation can give cell i more than its best efficiency
    let mut hi = busy
        .iter()
        .map(|&i| ReusePattern::all(n).map(|p| tbl.get(i, p)).fold(0.0, f64::max) / lambda[i])
        .fold(f64::INFINITY, f64::min);
    let mut lo = 0.0;
    let feasible = |rho: f64| supports_rates(tbl, &lambda.iter().map(|l| l * rho).collect::<Vec<_>>()).is_some();
    if hi == 0.0 {
        return 0.0;
    }
    if feasible(hi) {
        return hi;
    }
    while hi - lo > MARGIN_TOL * 0.5 * lo.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
