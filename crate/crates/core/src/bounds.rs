//! Per-cell delay bounds for the refined model. First-degree bounds freeze the
//! serving rate at its worst or best value; second-degree bounds let the other
//! cells be busy independently with probabilities computed from their worst
//! (upper) or best (lower) rates.

use serde::{Deserialize, Serialize};

use crate::allocation::Allocation;
use crate::conservative::check_lambda;
use crate::error::{Error, Result};
use crate::network::EfficiencyTable;
use crate::pattern::ReusePattern;
use crate::refined::{refined_eval, refined_rates, RefinedRates};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    /// `1 / (r_{i,N} - lambda_i)`; equals the conservative delay.
    pub first_upper: Vec<f64>,
    /// `1 / (r_{i,{i}} - lambda_i)`.
    pub first_lower: Vec<f64>,
    pub second_upper: Vec<f64>,
    pub second_lower: Vec<f64>,
    /// Refined approximation; `None` for cells without traffic.
    pub refined: Vec<Option<f64>>,
}

impl BoundsReport {
    /// Cells where the refined delay is not strictly inside the second-degree
    /// bracket, or the bracket is not inside the first-degree one.
    pub fn violations(&self) -> Vec<usize> {
        (0..self.first_upper.len())
            .filter(|&i| {
                let (lo, hi) = (self.second_lower[i], self.second_upper[i]);
                let inner = self.refined[i].is_none_or(|t| lo < t && t < hi);
                !(inner && self.first_lower[i] <= lo && hi <= self.first_upper[i])
            })
            .collect()
    }
}

fn check_stable(rates: &RefinedRates, lambda: &[f64]) -> Result<()> {
    for (i, &l) in lambda.iter().enumerate() {
        if l > 0.0 && rates.worst(i) <= l {
            return Err(Error::Unstable { cell: i, rate: rates.worst(i), arrival: l });
        }
    }
    Ok(())
}

fn inverse_gap(rate: f64, lambda: f64) -> f64 {
    if rate > lambda {
        1.0 / (rate - lambda)
    } else {
        f64::INFINITY
    }
}

/// `(upper, lower)` per cell.
pub fn first_degree_bounds(x: &Allocation, tbl: &EfficiencyTable, lambda: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lambda(tbl, lambda)?;
    let rates = refined_rates(x, tbl)?;
    check_stable(&rates, lambda)?;
    let n = tbl.n();
    let upper = (0..n).map(|i| inverse_gap(rates.worst(i), lambda[i])).collect();
    let lower = (0..n).map(|i| inverse_gap(rates.best(i), lambda[i])).collect();
    Ok((upper, lower))
}

/// Applies `f(pi(A), A | {i})` over every busy set `A` of the other cells,
/// where `pi` is the product-form law with per-cell activity `activity`.
fn mix_over_others(n: usize, i: usize, activity: &[f64], mut f: impl FnMut(f64, ReusePattern)) {
    let others = ReusePattern::full(n).without(i);
    for a in others.subsets() {
        let mut pi = 1.0;
        for j in others.members() {
            pi *= if a.contains(j) { activity[j] } else { 1.0 - activity[j] };
        }
        if pi > 0.0 {
            f(pi, a.with(i));
        }
    }
}

fn upper_from(rates: &RefinedRates, lambda: &[f64]) -> Vec<f64> {
    let n = rates.n();
    let activity: Vec<f64> = (0..n).map(|j| lambda[j] / rates.worst(j)).collect();
    (0..n)
        .map(|i| {
            let mut t = 0.0;
            mix_over_others(n, i, &activity, |pi, a| t += pi * inverse_gap(rates.get(i, a), lambda[i]));
            t
        })
        .collect()
}

fn lower_from(rates: &RefinedRates, lambda: &[f64]) -> Vec<f64> {
    let n = rates.n();
    let activity: Vec<f64> = (0..n).map(|j| lambda[j] / rates.best(j)).collect();
    (0..n)
        .map(|i| {
            let mut avg = 0.0;
            mix_over_others(n, i, &activity, |pi, a| avg += pi * rates.get(i, a));
            assert!(avg > lambda[i], "average rate below arrival rate under stability");
            1.0 / (avg - lambda[i])
        })
        .collect()
}

/// Other cells busy with probability `lambda_j / r_{j,N}`; expected
/// M/M/1 delay over their busy sets.
pub fn second_degree_upper(x: &Allocation, tbl: &EfficiencyTable, lambda: &[f64]) -> Result<Vec<f64>> {
    check_lambda(tbl, lambda)?;
    let rates = refined_rates(x, tbl)?;
    check_stable(&rates, lambda)?;
    Ok(upper_from(&rates, lambda))
}

/// Other cells busy with probability `lambda_j / r_{j,{j}}`; M/M/1 delay at
/// the expected rate.
pub fn second_degree_lower(x: &Allocation, tbl: &EfficiencyTable, lambda: &[f64]) -> Result<Vec<f64>> {
    check_lambda(tbl, lambda)?;
    let rates = refined_rates(x, tbl)?;
    check_stable(&rates, lambda)?;
    Ok(lower_from(&rates, lambda))
}

/// All bounds plus the refined approximation.
pub fn bounds_report(x: &Allocation, tbl: &EfficiencyTable, lambda: &[f64]) -> Result<BoundsReport> {
    let eval = refined_eval(x, tbl, lambda)?;
    let rates = &eval.rates;
    let n = tbl.n();
    Ok(BoundsReport {
        first_upper: (0..n).map(|i| inverse_gap(rates.worst(i), lambda[i])).collect(),
        first_lower: (0..n).map(|i| inverse_gap(rates.best(i), lambda[i])).collect(),
        second_upper: upper_from(rates, lambda),
        second_lower: lower_from(rates, lambda),
        refined: eval.report.sojourn,
    })
}
