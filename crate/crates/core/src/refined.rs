//! Refined delay model: each BTS serves at the rate allowed by the set of BTSs
//! that are busy right now. The coupled queues are approximated by a chain
//! over busy sets ("lumped states"): within a lumped state every busy queue is
//! an independent geometric queue, and transitions between lumped states
//! happen on arrivals to empty queues and on departures that empty a queue.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::allocation::Allocation;
use crate::conservative::{check_lambda, DelayReport};
use crate::error::{Error, Result};
use crate::network::EfficiencyTable;
use crate::pattern::ReusePattern;

/// Largest network the dense lumped-chain solve accepts.
pub const MAX_LUMPED_BTS: usize = 12;

/// `r_{i,A}` for every busy set `A` and cell `i`, stored set-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedRates {
    n: usize,
    r: Vec<f64>,
}

impl RefinedRates {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Rate of cell `i` while exactly the BTSs in `busy` transmit. Zero when
    /// `i` is not in `busy`.
    #[inline]
    pub fn get(&self, i: usize, busy: ReusePattern) -> f64 {
        self.r[busy.index() * self.n + i]
    }

    /// Worst case: every BTS busy. Equals the conservative rate.
    pub fn worst(&self, i: usize) -> f64 {
        self.get(i, ReusePattern::full(self.n))
    }

    /// Best case: only `i` busy.
    pub fn best(&self, i: usize) -> f64 {
        self.get(i, ReusePattern::singleton(i))
    }
}

/// `r_{i,A} = sum_B s[i, B & A] x_B`.
pub fn refined_rates(x: &Allocation, tbl: &EfficiencyTable) -> Result<RefinedRates> {
    x.check_table(tbl)?;
    let n = tbl.n();
    let active: Vec<(ReusePattern, f64)> = x.nonzero().collect();
    let mut r = vec![0.0; n << n];
    for a in ReusePattern::all(n) {
        let row = &mut r[a.index() * n..(a.index() + 1) * n];
        for &(b, w) in &active {
            let c = b.intersect(a);
            for i in c.members() {
                row[i] += tbl.get(i, c) * w;
            }
        }
    }
    Ok(RefinedRates { n, r })
}

/// Generator of the chain over busy sets, restricted to the sets reachable
/// from the empty network (subsets of the cells with traffic).
#[derive(Clone, Debug, PartialEq)]
pub struct LumpedChain {
    n: usize,
    states: Vec<ReusePattern>,
    generator: DMatrix<f64>,
}

impl LumpedChain {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Reachable busy sets, increasing bitmask; row/column order of the
    /// generator.
    pub fn states(&self) -> &[ReusePattern] {
        &self.states
    }

    pub fn generator(&self) -> &DMatrix<f64> {
        &self.generator
    }

    /// Rate from busy set `from` to busy set `to`; zero if either is unreachable.
    pub fn rate(&self, from: ReusePattern, to: ReusePattern) -> f64 {
        match (self.position(from), self.position(to)) {
            (Some(a), Some(b)) => self.generator[(a, b)],
            _ => 0.0,
        }
    }

    fn position(&self, s: ReusePattern) -> Option<usize> {
        self.states.binary_search(&s).ok()
    }
}

#[derive(Serialize)]
struct ChainDump {
    n: usize,
    /// `[from, to, rate]` for every nonzero off-diagonal entry.
    transitions: Vec<(u32, u32, f64)>,
}

impl Serialize for LumpedChain {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut transitions = Vec::new();
        for (a, from) in self.states.iter().enumerate() {
            for (b, to) in self.states.iter().enumerate() {
                let q = self.generator[(a, b)];
                if a != b && q != 0.0 {
                    transitions.push((from.bits(), to.bits(), q));
                }
            }
        }
        ChainDump { n: self.n, transitions }.serialize(s)
    }
}

/// Builds the lumped generator: arrival to an idle cell `i` at rate
/// `lambda_i`, emptying of a busy cell at `r_{i,A} - lambda_i`.
pub fn lumped_generator(rates: &RefinedRates, lambda: &[f64]) -> Result<LumpedChain> {
    let n = rates.n();
    if n > MAX_LUMPED_BTS {
        return Err(Error::ExponentialSize { n, cap: MAX_LUMPED_BTS });
    }
    if lambda.len() != n {
        return Err(Error::Dimension(format!("{} arrival rates for {n} BTSs", lambda.len())));
    }
    for (i, &l) in lambda.iter().enumerate() {
        if l > 0.0 && rates.worst(i) <= l {
            return Err(Error::Unstable { cell: i, rate: rates.worst(i), arrival: l });
        }
    }
    let busy = ReusePattern::from_indices((0..n).filter(|&i| lambda[i] > 0.0));
    let states: Vec<ReusePattern> = busy.subsets().collect();
    let pos = |s: ReusePattern| states.binary_search(&s).expect("reachable state");
    let m = states.len();
    let mut q = DMatrix::<f64>::zeros(m, m);
    for (k, &a) in states.iter().enumerate() {
        let mut out = 0.0;
        for i in busy.members() {
            let (to, rate) = if a.contains(i) {
                (a.without(i), rates.get(i, a) - lambda[i])
            } else {
                (a.with(i), lambda[i])
            };
            q[(k, pos(to))] = rate;
            out += rate;
        }
        q[(k, k)] = -out;
    }
    Ok(LumpedChain { n, states, generator: q })
}

/// Stationary distribution over busy sets, indexed by bitmask (unreachable
/// sets carry zero).
#[derive(Clone, Debug, PartialEq)]
pub struct SteadyState {
    n: usize,
    p: Vec<f64>,
}

impl SteadyState {
    #[inline]
    pub fn prob(&self, a: ReusePattern) -> f64 {
        self.p[a.index()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    /// Probability that cell `i` is busy.
    pub fn activity(&self, i: usize) -> f64 {
        ReusePattern::all(self.n).filter(|a| a.contains(i)).map(|a| self.prob(a)).sum()
    }
}

impl Serialize for SteadyState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<u32, f64> =
            self.p.iter().enumerate().filter(|(_, v)| **v > 0.0).map(|(b, v)| (b as u32, *v)).collect();
        map.serialize(s)
    }
}

/// Solves `p Q = 0`, `sum p = 1` by LU with the last balance equation
/// replaced by the normalization.
pub fn steady_state(chain: &LumpedChain) -> Result<SteadyState> {
    let m = chain.states.len();
    let mut full = vec![0.0; 1 << chain.n];
    if m == 1 {
        full[chain.states[0].index()] = 1.0;
        return Ok(SteadyState { n: chain.n, p: full });
    }
    let mut sys = chain.generator.transpose();
    sys.row_mut(m - 1).fill(1.0);
    let mut rhs = nalgebra::DVector::<f64>::zeros(m);
    rhs[m - 1] = 1.0;
    let p = sys.lu().solve(&rhs).ok_or_else(|| Error::Singular("lumped generator".into()))?;
    if let Some(v) = p.iter().find(|v| **v < -1e-12 || !v.is_finite()) {
        return Err(Error::Singular(format!("steady state has entry {v}")));
    }
    let total: f64 = p.iter().map(|v| v.max(0.0)).sum();
    for (k, s) in chain.states.iter().enumerate() {
        full[s.index()] = p[k].max(0.0) / total;
    }
    Ok(SteadyState { n: chain.n, p: full })
}

/// Queue-length law of a busy cell inside a lumped state:
/// `P(l) = (1 - rho) rho^(l-1)` for `l >= 1`, `rho = lambda / rate`.
pub fn conditional_queue_pmf(lambda: f64, rate: f64, l: u64) -> f64 {
    if l == 0 {
        return 0.0;
    }
    let rho = lambda / rate;
    (1.0 - rho) * rho.powi((l - 1) as i32)
}

/// Everything the refined model derives from one allocation.
#[derive(Clone, Debug)]
pub struct RefinedEval {
    pub rates: RefinedRates,
    pub steady: SteadyState,
    pub report: DelayReport,
    /// Mean queue length per cell.
    pub queue_length: Vec<f64>,
}

/// Refined-model evaluation: lumped chain, its stationary law and per-cell
/// delay by Little's law.
pub fn refined_eval(x: &Allocation, tbl: &EfficiencyTable, lambda: &[f64]) -> Result<RefinedEval> {
    check_lambda(tbl, lambda)?;
    let rates = refined_rates(x, tbl)?;
    let chain = lumped_generator(&rates, lambda)?;
    let steady = steady_state(&chain)?;
    let n = tbl.n();
    let mut queue_length = vec![0.0; n];
    let mut sojourn = vec![None; n];
    let mut eff = vec![0.0; n];
    for i in 0..n {
        let l = lambda[i];
        let mut lbar = 0.0;
        let mut busy_p = 0.0;
        let mut busy_r = 0.0;
        for &a in chain.states.iter().filter(|a| a.contains(i)) {
            let (p, r) = (steady.prob(a), rates.get(i, a));
            lbar += p * r / (r - l);
            busy_p += p;
            busy_r += p * r;
        }
        queue_length[i] = lbar;
        if l > 0.0 {
            sojourn[i] = Some(lbar / l);
            eff[i] = busy_r / busy_p;
        } else {
            // an idle cell would see the others at their stationary activity
            eff[i] = chain.states.iter().map(|&a| steady.prob(a) * rates.get(i, a.with(i))).sum();
        }
    }
    let report = DelayReport::from_parts(sojourn, eff, lambda);
    Ok(RefinedEval { rates, steady, report, queue_length })
}

/// Refined delay report. The reported rate of a cell with traffic is its
/// average rate while busy.
pub fn refined_delay(x: &Allocation, tbl: &EfficiencyTable, lambda: &[f64]) -> Result<DelayReport> {
    Ok(refined_eval(x, tbl, lambda)?.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conservative::conservative_delay;

    fn table2() -> EfficiencyTable {
        EfficiencyTable::from_fn(2, |i, p| match (i, p.bits()) {
            (0, 1) => 40.0,
            (1, 2) => 30.0,
            (0, 3) => 15.0,
            (1, 3) => 12.0,
            _ => unreachable!(),
        })
        .unwrap()
    }

    #[test]
    fn single_cell_collapses_to_mm1() {
        let t = EfficiencyTable::from_fn(1, |_, _| 20.0).unwrap();
        let x = Allocation::full_reuse(1);
        let rep = refined_delay(&x, &t, &[10.0]).unwrap();
        let cons = conservative_delay(&x, &t, &[10.0]).unwrap();
        assert!((rep.average - 0.1).abs() < 1e-15);
        assert_eq!(rep.average, cons.average);
        let ev = refined_eval(&x, &t, &[10.0]).unwrap();
        assert!((ev.steady.prob(ReusePattern(1)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_cell_chain_topology() {
        let t = table2();
        let x = Allocation::new(2, vec![0.0, 0.25, 0.25, 0.5]).unwrap();
        let rates = refined_rates(&x, &t).unwrap();
        let chain = lumped_generator(&rates, &[5.0, 4.0]).unwrap();
        let (e, a, b, ab) = (ReusePattern(0), ReusePattern(1), ReusePattern(2), ReusePattern(3));
        assert_eq!(chain.rate(e, a), 5.0);
        assert_eq!(chain.rate(e, b), 4.0);
        assert_eq!(chain.rate(a, ab), 4.0);
        assert_eq!(chain.rate(b, ab), 5.0);
        assert_eq!(chain.rate(e, ab), 0.0);
        assert_eq!(chain.rate(a, b), 0.0);
        // r_{1,{1}} = 40 * (0.25 + 0.5)
        assert!((chain.rate(a, e) - (30.0 - 5.0)).abs() < 1e-12);
        // r_{1,{1,2}} = 40 * 0.25 + 15 * 0.5
        assert!((chain.rate(ab, b) - (17.5 - 5.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_traffic_cell_is_not_applicable() {
        let t = table2();
        let x = Allocation::full_reuse(2);
        let rep = refined_delay(&x, &t, &[5.0, 0.0]).unwrap();
        assert!(rep.sojourn[1].is_none());
        // cell 0 alone: M/M/1 at its exclusive rate
        assert!((rep.sojourn[0].unwrap() - 1.0 / (40.0 - 5.0)).abs() < 1e-12);
    }

    #[test]
    fn unstable_worst_case_is_rejected() {
        let t = table2();
        match refined_delay(&Allocation::full_reuse(2), &t, &[16.0, 1.0]) {
            Err(Error::Unstable { cell: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn geometric_pmf_sums_to_one() {
        let total: f64 = (1..2000).map(|l| conditional_queue_pmf(3.0, 7.0, l)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(conditional_queue_pmf(3.0, 7.0, 0), 0.0);
        let mean: f64 = (1..2000).map(|l| l as f64 * conditional_queue_pmf(3.0, 7.0, l)).sum();
        assert!((mean - 7.0 / 4.0).abs() < 1e-10);
    }
}
