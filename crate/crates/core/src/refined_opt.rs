//! Allocation under the refined delay model. The objective goes through the
//! stationary law of the lumped chain, so its gradient is taken by central
//! finite differences; descent is a nonmonotone spectral projected gradient
//! on the simplex with a log-barrier on worst-case stability, started from
//! several points.

use nalgebra::{DMatrix, DVector, Dyn, LU};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{support_patterns, Allocation};
use crate::baselines::solve_orthogonal;
use crate::conservative::{check_lambda, solve_p1, stability_slack, DelayReport, SolverOptions};
use crate::error::{Error, Result};
use crate::network::EfficiencyTable;
use crate::pattern::ReusePattern;
use crate::refined::refined_delay;

/// Barrier weights of the successive stages, relative to the objective at the
/// start point.
const BARRIER_STAGES: [f64; 3] = [1e-3, 1e-5, 0.0];
/// Relative objective difference under which two restarts count as agreeing.
const AGREEMENT_TOL: f64 = 1e-6;
/// Stationarity target: Frank-Wolfe gap over objective. Finite-difference
/// noise makes the conservative solver's default unreachable.
const P2_GAP_FLOOR: f64 = 1e-6;
const NONMONOTONE_MEMORY: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub start: String,
    pub start_objective: f64,
    pub objective: f64,
    pub iterations: usize,
    /// Final relative Frank-Wolfe gap.
    pub gap: f64,
    /// Iteration cap hit or line search failed before the gap target.
    pub stalled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct P2Solution {
    pub allocation: Allocation,
    pub report: DelayReport,
    pub objective: f64,
    pub restarts: Vec<RestartSummary>,
    /// Fraction of restarts ending within `1e-6` relative of the best.
    pub agreement: f64,
    /// The best restart stopped without reaching the gap target.
    pub stalled: bool,
    pub warnings: Vec<String>,
}

/// Refined average delay on raw pattern weights (index = bitmask), without
/// any simplex check.
struct Objective<'a> {
    tbl: &'a EfficiencyTable,
    lambda: &'a [f64],
    n: usize,
    total: f64,
    delta: f64,
    /// Reachable busy sets and their row in the chain.
    states: Vec<ReusePattern>,
    slot: Vec<usize>,
}

/// Factorization of the stationary system at one point, reused to solve
/// nearby systems by iterative refinement.
struct Factored {
    lu: LU<f64, Dyn, Dyn>,
    p: DVector<f64>,
}

impl<'a> Objective<'a> {
    fn new(tbl: &'a EfficiencyTable, lambda: &'a [f64]) -> Self {
        let n = tbl.n();
        let busy = ReusePattern::from_indices((0..n).filter(|&i| lambda[i] > 0.0));
        let states: Vec<ReusePattern> = busy.subsets().collect();
        let mut slot = vec![usize::MAX; 1 << n];
        for (k, s) in states.iter().enumerate() {
            slot[s.index()] = k;
        }
        Objective { tbl, lambda, n, total: lambda.iter().sum(), delta: stability_slack(lambda), states, slot }
    }

    fn rates(&self, y: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut r = vec![0.0; n << n];
        for (b, &w) in y.iter().enumerate().filter(|(_, w)| **w != 0.0) {
            self.add_pattern(&mut r, ReusePattern(b as u32), w);
        }
        r
    }

    /// `r += w * s[., B & A]` for every busy set `A`.
    fn add_pattern(&self, r: &mut [f64], b: ReusePattern, w: f64) {
        let n = self.n;
        for a in ReusePattern::all(n) {
            let c = b.intersect(a);
            let base = a.index() * n;
            for i in c.members() {
                r[base + i] += w * self.tbl.get(i, c);
            }
        }
    }

    fn worst(&self, r: &[f64], i: usize) -> f64 {
        r[ReusePattern::full(self.n).index() * self.n + i]
    }

    fn feasible(&self, r: &[f64]) -> bool {
        (0..self.n).all(|i| self.lambda[i] == 0.0 || self.worst(r, i) >= self.lambda[i] + self.delta)
    }

    /// Stationary system matrix: transposed generator with the last balance
    /// equation replaced by the normalization.
    fn system(&self, r: &[f64]) -> DMatrix<f64> {
        let m = self.states.len();
        let mut q = DMatrix::<f64>::zeros(m, m);
        for (k, &a) in self.states.iter().enumerate() {
            for i in (0..self.n).filter(|&i| self.lambda[i] > 0.0) {
                let (to, rate) = if a.contains(i) {
                    (a.without(i), r[a.index() * self.n + i] - self.lambda[i])
                } else {
                    (a.with(i), self.lambda[i])
                };
                let j = self.slot[to.index()];
                // column k of Q^T is row k of Q
                q[(j, k)] += rate;
                q[(k, k)] -= rate;
            }
        }
        q.row_mut(m - 1).fill(1.0);
        q
    }

    /// `M(r) p` without forming `M(r)`.
    fn apply(&self, r: &[f64], p: &DVector<f64>) -> DVector<f64> {
        let m = self.states.len();
        let mut out = DVector::<f64>::zeros(m);
        for (k, &a) in self.states.iter().enumerate() {
            for i in (0..self.n).filter(|&i| self.lambda[i] > 0.0) {
                let (to, rate) = if a.contains(i) {
                    (a.without(i), r[a.index() * self.n + i] - self.lambda[i])
                } else {
                    (a.with(i), self.lambda[i])
                };
                let flow = p[k] * rate;
                out[self.slot[to.index()]] += flow;
                out[k] -= flow;
            }
        }
        out[m - 1] = p.sum();
        out
    }

    fn unit(&self) -> DVector<f64> {
        let m = self.states.len();
        let mut e = DVector::<f64>::zeros(m);
        e[m - 1] = 1.0;
        e
    }

    fn factor(&self, r: &[f64]) -> Option<Factored> {
        let lu = self.system(r).lu();
        let p = lu.solve(&self.unit())?;
        Some(Factored { lu, p })
    }

    /// Stationary law at `r`, refined from a nearby factorization when one
    /// is given.
    fn stationary(&self, r: &[f64], near: Option<&Factored>) -> Option<DVector<f64>> {
        if let Some(base) = near {
            let e = self.unit();
            let mut p = base.p.clone();
            for _ in 0..8 {
                let resid = &e - self.apply(r, &p);
                let step = base.lu.solve(&resid)?;
                p += &step;
                if step.amax() <= 1e-15 {
                    return Some(p);
                }
            }
        }
        Some(self.factor(r)?.p)
    }

    /// Objective plus `mu * barrier`; `None` outside the stability region.
    fn value_with(&self, r: &[f64], mu: f64, near: Option<&Factored>) -> Option<f64> {
        if !self.feasible(r) {
            return None;
        }
        if self.states.len() == 1 {
            return Some(0.0);
        }
        let p = self.stationary(r, near)?;
        if p.iter().any(|v| *v < -1e-12 || !v.is_finite()) {
            return None;
        }
        let mut acc = 0.0;
        for (k, &a) in self.states.iter().enumerate() {
            let pa = p[k].max(0.0);
            for i in a.members() {
                let ri = r[a.index() * self.n + i];
                acc += pa * ri / (ri - self.lambda[i]);
            }
        }
        let mut f = acc / (self.total * p.iter().map(|v| v.max(0.0)).sum::<f64>());
        if mu > 0.0 {
            for i in (0..self.n).filter(|&i| self.lambda[i] > 0.0) {
                f -= mu * (self.worst(r, i) - self.lambda[i]).ln();
            }
        }
        f.is_finite().then_some(f)
    }

    fn eval(&self, y: &[f64], mu: f64) -> Option<f64> {
        self.value_with(&self.rates(y), mu, None)
    }

    /// Central differences, projected onto `sum d = 0`. Index 0 (empty
    /// pattern) stays zero.
    fn gradient(&self, y: &[f64], mu: f64) -> Vec<f64> {
        let base = self.rates(y);
        let near = if self.states.len() > 1 { self.factor(&base) } else { None };
        let near = near.as_ref();
        let m = y.len();
        let mut g = vec![0.0; m];
        let mut work = base.clone();
        for b in 1..m {
            let h = (1e-6 * y[b]).max(1e-9);
            let pat = ReusePattern(b as u32);
            work.copy_from_slice(&base);
            self.add_pattern(&mut work, pat, h);
            let up = self.value_with(&work, mu, near);
            work.copy_from_slice(&base);
            self.add_pattern(&mut work, pat, -h);
            let dn = self.value_with(&work, mu, near);
            let f0 = || self.value_with(&base, mu, near);
            g[b] = match (up, dn) {
                (Some(u), Some(d)) => (u - d) / (2.0 * h),
                (Some(u), None) => (u - f0().unwrap_or(u)) / h,
                (None, Some(d)) => (f0().unwrap_or(d) - d) / h,
                (None, None) => 0.0,
            };
        }
        let mean = g[1..].iter().sum::<f64>() / (m - 1) as f64;
        g[1..].iter_mut().for_each(|v| *v -= mean);
        g
    }
}

/// Euclidean projection onto `{y >= 0, sum y = 1}` for entries `1..`.
fn project(v: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = v[1..].to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        acc += uk;
        let t = (acc - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    let mut out = vec![0.0; v.len()];
    for b in 1..v.len() {
        out[b] = (v[b] - theta).max(0.0);
    }
    out
}

fn fw_gap(g: &[f64], y: &[f64], f: f64) -> f64 {
    let gy: f64 = g[1..].iter().zip(&y[1..]).map(|(a, b)| a * b).sum();
    let gmin = g[1..].iter().cloned().fold(f64::INFINITY, f64::min);
    (gy - gmin).max(0.0) / f.abs().max(f64::MIN_POSITIVE)
}

struct Descent {
    y: Vec<f64>,
    f: f64,
    iterations: usize,
    gap: f64,
    stalled: bool,
}

/// Nonmonotone spectral projected gradient for one barrier weight.
fn spg(obj: &Objective, mut y: Vec<f64>, mu: f64, tol: f64, max_iter: usize) -> Descent {
    let mut f = obj.eval(&y, mu).expect("feasible start");
    let mut g = obj.gradient(&y, mu);
    let mut history = vec![f];
    let mut best = (f, y.clone());
    let mut alpha = {
        let d: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - b).collect();
        let p = project(&d);
        let step = p.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if step > 0.0 {
            1.0 / step
        } else {
            1.0
        }
    };
    let mut stalled = true;
    let mut gap = fw_gap(&g, &y, f);
    let mut it = 0;
    while it < max_iter {
        gap = fw_gap(&g, &y, f);
        if gap < tol {
            stalled = false;
            break;
        }
        it += 1;
        let trial: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - alpha * b).collect();
        let d: Vec<f64> = project(&trial).iter().zip(&y).map(|(p, v)| p - v).collect();
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            stalled = gap > 10.0 * tol;
            break;
        }
        let fmax = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut lam = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = y.iter().zip(&d).map(|(a, b)| (a + lam * b).max(0.0)).collect();
            if let Some(fc) = obj.eval(&cand, mu) {
                if fc <= fmax + 1e-4 * lam * slope {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            lam *= 0.5;
        }
        let Some((ynew, fnew)) = accepted else {
            stalled = gap > 10.0 * tol;
            break;
        };
        let gnew = obj.gradient(&ynew, mu);
        let s: Vec<f64> = ynew.iter().zip(&y).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(gnew.iter().zip(&g)).map(|(si, (a, b))| si * (a - b)).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        alpha = if sy > 0.0 { (ss / sy).clamp(1e-30, 1e30) } else { 1e30_f64.min(alpha * 10.0) };
        y = ynew;
        f = fnew;
        g = gnew;
        history.push(f);
        if history.len() > NONMONOTONE_MEMORY {
            history.remove(0);
        }
        if f < best.0 {
            best = (f, y.clone());
        }
    }
    if best.0 < f {
        y = best.1;
        f = best.0;
    }
    Descent { y, f, iterations: it, gap, stalled }
}

fn descend(obj: &Objective, start: Vec<f64>, opts: &SolverOptions) -> Descent {
    let tol = opts.tol.max(P2_GAP_FLOOR);
    let f0 = obj.eval(&start, 0.0).expect("feasible start");
    let mut y = start;
    let mut total = 0;
    let mut last = None;
    for (k, &w) in BARRIER_STAGES.iter().enumerate() {
        let final_stage = k + 1 == BARRIER_STAGES.len();
        let stage_tol = if final_stage { tol } else { tol * 100.0 };
        let d = spg(obj, y, w * f0, stage_tol, opts.max_iter);
        total += d.iterations;
        y = d.y.clone();
        last = Some(d);
    }
    let mut d = last.unwrap();
    d.iterations = total;
    d.f = obj.eval(&d.y, 0.0).unwrap();
    d
}

/// Pulls `y` toward the feasible `anchor` until it is strictly stable.
fn mix_until_feasible(obj: &Objective, y: &[f64], anchor: &[f64]) -> Vec<f64> {
    let mut theta = 1.0;
    loop {
        let z: Vec<f64> = y.iter().zip(anchor).map(|(a, b)| theta * a + (1.0 - theta) * b).collect();
        if obj.eval(&z, 0.0).is_some() || theta < 1e-12 {
            return if theta < 1e-12 { anchor.to_vec() } else { z };
        }
        theta *= 0.5;
    }
}

/// The refined objective at `x` with its projected finite-difference
/// gradient over all patterns.
pub fn p2_objective_and_gradient(x: &Allocation, tbl: &EfficiencyTable, lambda: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_lambda(tbl, lambda)?;
    x.check_table(tbl)?;
    let obj = Objective::new(tbl, lambda);
    let y = x.as_slice();
    let f = obj.eval(y, 0.0).ok_or_else(|| {
        let r = obj.rates(y);
        let i = (0..tbl.n()).find(|&i| lambda[i] > 0.0 && obj.worst(&r, i) <= lambda[i]).unwrap_or(0);
        Error::Unstable { cell: i, rate: obj.worst(&r, i), arrival: lambda[i] }
    })?;
    Ok((f, obj.gradient(y, 0.0)))
}

/// Refined average delay; `+inf` outside the stability region.
pub fn p2_objective(x: &Allocation, tbl: &EfficiencyTable, lambda: &[f64]) -> f64 {
    Objective::new(tbl, lambda).eval(x.as_slice(), 0.0).unwrap_or(f64::INFINITY)
}

/// Minimizes the refined average delay from several starts and keeps the
/// best local minimizer.
pub fn solve_p2(tbl: &EfficiencyTable, lambda: &[f64], opts: &SolverOptions) -> Result<P2Solution> {
    check_lambda(tbl, lambda)?;
    let n = tbl.n();
    if n > crate::refined::MAX_LUMPED_BTS {
        return Err(Error::ExponentialSize { n, cap: crate::refined::MAX_LUMPED_BTS });
    }
    let obj = Objective::new(tbl, lambda);
    if n == 1 || obj.total == 0.0 {
        let x = if n == 1 { Allocation::full_reuse(1) } else { Allocation::full_reuse(n) };
        let report = refined_delay(&x, tbl, lambda)?;
        return Ok(P2Solution {
            objective: report.average,
            allocation: x,
            report,
            restarts: vec![],
            agreement: 1.0,
            stalled: false,
            warnings: vec![],
        });
    }
    let p1 = solve_p1(tbl, lambda, opts)?.allocation;
    let anchor = p1.as_slice().to_vec();
    let mut starts: Vec<(String, Vec<f64>)> = Vec::new();
    let push = |starts: &mut Vec<(String, Vec<f64>)>, name: &str, y: Vec<f64>| {
        starts.push((name.to_string(), mix_until_feasible(&obj, &y, &anchor)));
    };
    push(&mut starts, "full_reuse", Allocation::full_reuse(n).into_vec());
    push(&mut starts, "conservative", anchor.clone());
    let orth = solve_orthogonal(tbl, lambda, opts).map(|(x, _)| x).unwrap_or_else(|_| Allocation::uniform_orthogonal(n));
    push(&mut starts, "orthogonal", orth.into_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for k in 0..opts.restarts.saturating_sub(3) {
        let mut w: Vec<f64> = (0..1usize << n).map(|b| if b == 0 { 0.0 } else { Exp1.sample(&mut rng) }).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        push(&mut starts, &format!("random{}", k + 1), w);
    }
    starts.truncate(opts.restarts.max(1));

    let runs: Vec<(RestartSummary, Vec<f64>)> = starts
        .into_par_iter()
        .map(|(name, y0)| {
            let f_start = obj.eval(&y0, 0.0).unwrap();
            let d = descend(&obj, y0, opts);
            let summary = RestartSummary {
                start: name,
                start_objective: f_start,
                objective: d.f,
                iterations: d.iterations,
                gap: d.gap,
                stalled: d.stalled,
            };
            (summary, d.y)
        })
        .collect();
    let (best_idx, _) = runs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .0.objective.total_cmp(&b.1 .0.objective))
        .expect("at least one restart");
    let best_f = runs[best_idx].0.objective;
    let agree = runs.iter().filter(|(s, _)| (s.objective - best_f).abs() <= AGREEMENT_TOL * best_f).count();
    let y = &runs[best_idx].1;
    let sum: f64 = y.iter().sum();
    let allocation = Allocation::new(n, y.iter().map(|v| v / sum).collect())?;
    let report = refined_delay(&allocation, tbl, lambda)?;
    let mut warnings = Vec::new();
    let support = support_patterns(&allocation).len();
    if support > n + 3 {
        warnings.push(format!("{support} active patterns for {n} cells"));
    }
    let stalled = runs[best_idx].0.stalled;
    Ok(P2Solution {
        objective: report.average,
        allocation,
        report,
        agreement: agree as f64 / runs.len() as f64,
        restarts: runs.into_iter().map(|(s, _)| s).collect(),
        stalled,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_lands_on_simplex() {
        let p = project(&[0.0, 0.7, 0.7, -0.2, 0.1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p.iter().all(|v| *v >= 0.0));
        assert_eq!(p[3], 0.0);
        assert!((p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_cell_is_full_mass() {
        let t = EfficiencyTable::from_fn(1, |_, _| 20.0).unwrap();
        let sol = solve_p2(&t, &[10.0], &SolverOptions::default()).unwrap();
        assert_eq!(sol.allocation.get(ReusePattern(1)), 1.0);
        assert!((sol.objective - 0.1).abs() < 1e-15);
        let (f, _) = p2_objective_and_gradient(&Allocation::full_reuse(1), &t, &[10.0]).unwrap();
        assert!((f - 0.1).abs() < 1e-15);
    }
}
