//! Conservative allocation: every cell is an independent M/M/1 queue served at
//! the worst-case rate `r_i = sum_B s[i, B] x_B`, and the traffic-weighted mean
//! sojourn time is minimized over the simplex.
//!
//! Two solvers are provided. [`solve_p1`] runs a log-barrier interior-point
//! method over every pattern followed by an active-set crossover that lands on
//! an exact face of the simplex. [`algorithm1`] grows a candidate set of
//! patterns column-generation style, pricing all patterns by the partial
//! derivatives of the objective.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::allocation::{support_patterns, Allocation};
use crate::baselines::throughput_margin;
use crate::error::{Error, Result};
use crate::lp::supports_rates;
use crate::network::EfficiencyTable;
use crate::pattern::ReusePattern;

/// Solver knobs shared by the allocation problems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Target relative optimality gap (Frank-Wolfe gap over objective).
    pub tol: f64,
    pub max_iter: usize,
    /// Initial barrier weight, relative to the objective at the start point.
    pub barrier_init: f64,
    /// Geometric decrease factor of the barrier weight.
    pub barrier_decay: f64,
    /// Number of starts for the refined problem.
    pub restarts: usize,
    /// Seed for randomized starts.
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-8, max_iter: 500, barrier_init: 1e-2, barrier_decay: 0.1, restarts: 5, seed: 0 }
    }
}

/// Per-cell sojourn times and service rates with the traffic-weighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayReport {
    /// Mean sojourn time per cell in seconds; `None` where undefined (no
    /// traffic and nothing to report).
    pub sojourn: Vec<Option<f64>>,
    /// `sum_i lambda_i t_i / sum_j lambda_j`; zero when there is no traffic.
    pub average: f64,
    /// Service rate per cell, packets/second.
    pub rates: Vec<f64>,
}

impl DelayReport {
    pub(crate) fn from_parts(sojourn: Vec<Option<f64>>, rates: Vec<f64>, lambda: &[f64]) -> Self {
        let total: f64 = lambda.iter().sum();
        let average = if total > 0.0 {
            sojourn.iter().zip(lambda).filter(|(_, l)| **l > 0.0).map(|(t, l)| l * t.unwrap_or(f64::INFINITY)).sum::<f64>()
                / total
        } else {
            0.0
        };
        DelayReport { sojourn, average, rates }
    }
}

pub(crate) fn check_lambda(tbl: &EfficiencyTable, lambda: &[f64]) -> Result<()> {
    if lambda.len() != tbl.n() {
        return Err(Error::Dimension(format!("{} arrival rates for {} BTSs", lambda.len(), tbl.n())));
    }
    if let Some(l) = lambda.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidScenario(format!("arrival rate {l} must be finite and >= 0")));
    }
    Ok(())
}

/// `r_i = sum_B s[i, B] x_B`.
pub fn conservative_rates(x: &Allocation, tbl: &EfficiencyTable) -> Vec<f64> {
    let mut r = vec![0.0; tbl.n()];
    for (p, w) in x.nonzero() {
        for (ri, s) in r.iter_mut().zip(tbl.column(p)) {
            *ri += s * w;
        }
    }
    r
}

/// M/M/1 sojourn times `1 / (r_i - lambda_i)` and their traffic-weighted mean.
pub fn conservative_delay(x: &Allocation, tbl: &EfficiencyTable, lambda: &[f64]) -> Result<DelayReport> {
    x.check_table(tbl)?;
    check_lambda(tbl, lambda)?;
    let rates = conservative_rates(x, tbl);
    let mut sojourn = Vec::with_capacity(rates.len());
    for (i, (&r, &l)) in rates.iter().zip(lambda).enumerate() {
        if l > 0.0 && r <= l {
            return Err(Error::Unstable { cell: i, rate: r, arrival: l });
        }
        sojourn.push(if r > l { Some(1.0 / (r - l)) } else { None });
    }
    Ok(DelayReport::from_parts(sojourn, rates, lambda))
}

/// The conservative objective; `+inf` outside the stability region.
pub fn p1_objective(x: &Allocation, tbl: &EfficiencyTable, lambda: &[f64]) -> f64 {
    P1::new(tbl, lambda).value(&conservative_rates(x, tbl))
}

/// `d T / d x_B` for every pattern (index = bitmask), at allocation `x`.
pub fn pattern_gradient(x: &Allocation, tbl: &EfficiencyTable, lambda: &[f64]) -> Vec<f64> {
    let p = P1::new(tbl, lambda);
    let a = p.grad_r(&conservative_rates(x, tbl));
    ReusePattern::all(tbl.n()).map(|b| dot(tbl.column(b), &a)).collect()
}

/// Active patterns of `x` (see [`support_patterns`]).
pub fn support(x: &Allocation) -> Vec<ReusePattern> {
    support_patterns(x)
}

/// Strict-stability slack: `r_i >= lambda_i + delta`.
pub(crate) fn stability_slack(lambda: &[f64]) -> f64 {
    1e-9 * lambda.iter().cloned().fold(0.0, f64::max)
}

pub(crate) fn strictly_stable(r: &[f64], lambda: &[f64]) -> bool {
    let delta = stability_slack(lambda);
    r.iter().zip(lambda).all(|(r, l)| *l == 0.0 || *r >= l + delta && *r > *l)
}

/// A strictly stable allocation with at most `n + 1` active patterns, from a
/// phase-1 linear program. Outside the throughput region the error carries the
/// largest supportable scaling of `lambda`.
pub fn find_feasible(tbl: &EfficiencyTable, lambda: &[f64]) -> Result<Allocation> {
    check_lambda(tbl, lambda)?;
    if lambda.iter().all(|l| *l == 0.0) {
        return Ok(Allocation::full_reuse(tbl.n()));
    }
    let margin = throughput_margin(tbl, lambda);
    if margin <= 1.0 + 1e-9 {
        return Err(Error::Infeasible { margin });
    }
    // aim halfway into the region so the start point has slack
    let scale = 0.5 * (1.0 + margin.min(1e6));
    let target: Vec<f64> = lambda.iter().map(|l| l * scale).collect();
    let x = supports_rates(tbl, &target)
        .or_else(|| supports_rates(tbl, &lambda.iter().map(|l| l * (1.0 + 1e-7)).collect::<Vec<_>>()))
        .ok_or(Error::Infeasible { margin })?;
    if !strictly_stable(&conservative_rates(&x, tbl), lambda) {
        return Err(Error::Infeasible { margin });
    }
    Ok(x)
}

/// Full reuse when it is strictly stable, otherwise the phase-1 point.
pub(crate) fn initial_point(tbl: &EfficiencyTable, lambda: &[f64]) -> Result<Allocation> {
    let full = Allocation::full_reuse(tbl.n());
    if strictly_stable(&conservative_rates(&full, tbl), lambda) {
        Ok(full)
    } else {
        find_feasible(tbl, lambda)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct P1Solution {
    pub allocation: Allocation,
    pub report: DelayReport,
    pub objective: f64,
    /// Frank-Wolfe gap relative to the objective; bounds the relative
    /// suboptimality.
    pub kkt_residual: f64,
    /// Newton iterations (barrier plus crossover).
    pub iterations: usize,
}

/// Minimizes the conservative mean delay over all `2^n` patterns.
pub fn solve_p1(tbl: &EfficiencyTable, lambda: &[f64], opts: &SolverOptions) -> Result<P1Solution> {
    check_lambda(tbl, lambda)?;
    let n = tbl.n();
    let problem = P1::new(tbl, lambda);
    if problem.total == 0.0 {
        return finish(tbl, lambda, Allocation::full_reuse(n), 0.0, 0);
    }
    let x0 = initial_point(tbl, lambda)?;
    let cands: Vec<ReusePattern> = ReusePattern::all(n).skip(1).collect();
    let start = interior_start(&problem, &cands, &x0);
    let (y, it1) = barrier_solve(&problem, &cands, start, opts)?;
    let mut active = ActiveSet::new(&problem, &cands, y);
    let it2 = active.solve(opts)?;
    let x = active.allocation();
    finish(tbl, lambda, x, active.kkt_residual(), it1 + it2)
}

fn finish(tbl: &EfficiencyTable, lambda: &[f64], x: Allocation, kkt: f64, iterations: usize) -> Result<P1Solution> {
    let report = conservative_delay(&x, tbl, lambda)?;
    Ok(P1Solution { objective: report.average, allocation: x, report, kkt_residual: kkt, iterations })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Algorithm1Step {
    pub iteration: usize,
    /// Objective after the restricted solve of this iteration.
    pub objective: f64,
    /// Candidate patterns the restricted solve was run over.
    pub candidates: Vec<ReusePattern>,
    /// Patterns newly added by the gradient test.
    pub added: Vec<ReusePattern>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Algorithm1Result {
    pub allocation: Allocation,
    pub report: DelayReport,
    pub objective: f64,
    pub kkt_residual: f64,
    pub trace: Vec<Algorithm1Step>,
}

impl Algorithm1Result {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

/// Candidate-set iteration: solve restricted to the candidate patterns, price
/// every pattern by its partial derivative, add the `n` smallest that improve
/// on the current solution, stop when nothing new enters.
pub fn algorithm1(tbl: &EfficiencyTable, lambda: &[f64], opts: &SolverOptions) -> Result<Algorithm1Result> {
    check_lambda(tbl, lambda)?;
    let n = tbl.n();
    let problem = P1::new(tbl, lambda);
    if problem.total == 0.0 {
        let x = Allocation::full_reuse(n);
        let report = conservative_delay(&x, tbl, lambda)?;
        return Ok(Algorithm1Result { allocation: x, report, objective: 0.0, kkt_residual: 0.0, trace: vec![] });
    }
    let mut x_prev = initial_point(tbl, lambda)?;
    let mut cand: Vec<ReusePattern> = x_prev.nonzero().map(|(p, _)| p).collect();
    let mut cand_prev: Vec<ReusePattern> = Vec::new();
    let mut trace = Vec::new();
    let mut kkt = f64::INFINITY;
    let max_rounds = (1usize << n).min(opts.max_iter.max(1));
    while !cand.iter().all(|c| cand_prev.contains(c)) {
        if trace.len() >= max_rounds {
            return Err(Error::NoConvergence { iterations: trace.len(), residual: kkt });
        }
        cand_prev = cand.clone();
        let y0: Vec<f64> = cand.iter().map(|p| x_prev.get(*p)).collect();
        let mut active = ActiveSet::new(&problem, &cand, y0);
        active.solve(opts)?;
        let x = active.allocation();
        let r = conservative_rates(&x, tbl);
        let a = problem.grad_r(&r);
        let f = problem.value(&r);
        let grads: Vec<(ReusePattern, f64)> = ReusePattern::all(n).skip(1).map(|b| (b, dot(tbl.column(b), &a))).collect();
        let nu: f64 = x.nonzero().map(|(p, v)| v * grads[p.index() - 1].1).sum();
        let gmin = grads.iter().map(|g| g.1).fold(f64::INFINITY, f64::min);
        kkt = (nu - gmin).max(0.0) / f;
        let mut order = grads.clone();
        // n smallest derivatives, ties to the lowest bitmask
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let price_tol = 0.1 * opts.tol * f;
        let added: Vec<ReusePattern> = order
            .iter()
            .take(n)
            .filter(|(b, g)| *g < nu - price_tol && !cand_prev.contains(b))
            .map(|(b, _)| *b)
            .collect();
        cand = cand_prev.iter().chain(&added).copied().collect();
        cand.sort();
        trace.push(Algorithm1Step { iteration: trace.len() + 1, objective: f, candidates: cand_prev.clone(), added });
        x_prev = x;
    }
    let report = conservative_delay(&x_prev, tbl, lambda)?;
    Ok(Algorithm1Result { objective: report.average, allocation: x_prev, report, kkt_residual: kkt, trace })
}

/// Minimizes the conservative objective over a subset of patterns starting
/// from a strictly stable allocation supported on that subset.
pub fn solve_restricted(
    tbl: &EfficiencyTable,
    lambda: &[f64],
    candidates: &[ReusePattern],
    start: &Allocation,
    opts: &SolverOptions,
) -> Result<P1Solution> {
    check_lambda(tbl, lambda)?;
    let problem = P1::new(tbl, lambda);
    let y0: Vec<f64> = candidates.iter().map(|p| start.get(*p)).collect();
    if (y0.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidAllocation("start point is not supported on the candidate set".into()));
    }
    let mut active = ActiveSet::new(&problem, candidates, y0);
    let it = active.solve(opts)?;
    let x = active.allocation();
    finish(tbl, lambda, x, active.kkt_residual(), it)
}

// ---------------------------------------------------------------------------
// Objective in rate space
// ---------------------------------------------------------------------------

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `f(r) = sum_i lambda_i / (r_i - lambda_i) / sum_j lambda_j`.
pub(crate) struct P1<'a> {
    pub tbl: &'a EfficiencyTable,
    pub lambda: &'a [f64],
    pub total: f64,
}

impl<'a> P1<'a> {
    pub fn new(tbl: &'a EfficiencyTable, lambda: &'a [f64]) -> Self {
        P1 { tbl, lambda, total: lambda.iter().sum() }
    }

    fn busy(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.lambda.iter().copied().enumerate().filter(|(_, l)| *l > 0.0)
    }

    pub fn value(&self, r: &[f64]) -> f64 {
        let mut v = 0.0;
        for (i, l) in self.busy() {
            let gap = r[i] - l;
            if gap <= 0.0 {
                return f64::INFINITY;
            }
            v += l / gap;
        }
        v / self.total
    }

    pub fn grad_r(&self, r: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; r.len()];
        for (i, l) in self.busy() {
            let gap = r[i] - l;
            g[i] = -l / (self.total * gap * gap);
        }
        g
    }

    pub fn hess_r(&self, r: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; r.len()];
        for (i, l) in self.busy() {
            let gap = r[i] - l;
            h[i] = 2.0 * l / (self.total * gap * gap * gap);
        }
        h
    }

    fn rates(&self, cands: &[ReusePattern], y: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.tbl.n()];
        for (p, w) in cands.iter().zip(y) {
            if *w != 0.0 {
                for (ri, s) in r.iter_mut().zip(self.tbl.column(*p)) {
                    *ri += s * w;
                }
            }
        }
        r
    }
}

/// Mixes the feasible point with the uniform distribution over `cands` until
/// every weight is positive and the rates stay strictly stable.
fn interior_start(p: &P1, cands: &[ReusePattern], x0: &Allocation) -> Vec<f64> {
    let m = cands.len() as f64;
    let base: Vec<f64> = cands.iter().map(|c| x0.get(*c)).collect();
    let mut theta = 0.5;
    loop {
        let y: Vec<f64> = base.iter().map(|b| (1.0 - theta) * b + theta / m).collect();
        if strictly_stable(&p.rates(cands, &y), p.lambda) || theta < 1e-14 {
            return y;
        }
        theta *= 0.5;
    }
}

/// Path-following log-barrier method on the simplex restricted to `cands`.
/// The Newton system is `n`-dimensional thanks to the low-rank structure of
/// the Hessian (`S^T D S` plus a diagonal).
fn barrier_solve(p: &P1, cands: &[ReusePattern], mut y: Vec<f64>, opts: &SolverOptions) -> Result<(Vec<f64>, usize)> {
    let n = p.tbl.n();
    let m = cands.len();
    let busy: Vec<usize> = p.busy().map(|(i, _)| i).collect();
    let barrier_terms = (m + busy.len()) as f64;
    let f0 = p.value(&p.rates(cands, &y));
    let mut mu = opts.barrier_init * f0 / barrier_terms;
    let mu_final = 1e-3 * opts.tol * f0 / barrier_terms;
    let cols: Vec<&[f64]> = cands.iter().map(|c| p.tbl.column(*c)).collect();

    let phi = |y: &[f64], mu: f64| -> f64 {
        if y.iter().any(|v| *v <= 0.0) {
            return f64::INFINITY;
        }
        let r = p.rates(cands, y);
        let f = p.value(&r);
        if !f.is_finite() {
            return f64::INFINITY;
        }
        let mut b = -y.iter().map(|v| v.ln()).sum::<f64>();
        for &i in &busy {
            b -= (r[i] - p.lambda[i]).ln();
        }
        f + mu * b
    };

    let mut iters = 0usize;
    loop {
        for _ in 0..100 {
            iters += 1;
            let r = p.rates(cands, &y);
            let a = p.grad_r(&r);
            let h = p.hess_r(&r);
            let mut ar = a.clone();
            let mut d = h.clone();
            for &i in &busy {
                let gap = r[i] - p.lambda[i];
                ar[i] -= mu / gap;
                d[i] += mu / (gap * gap);
            }
            let g: Vec<f64> = (0..m).map(|k| dot(cols[k], &ar) - mu / y[k]).collect();
            // H = diag(mu / y^2) + S^T D S,  E = H_diag^-1
            let e: Vec<f64> = y.iter().map(|v| v * v / mu).collect();
            let dh: Vec<f64> = d.iter().map(|v| v.sqrt()).collect();
            // U = D^1/2 S  (n x m)
            let mut mm = DMatrix::<f64>::identity(n, n);
            for k in 0..m {
                for i in 0..n {
                    let ui = dh[i] * cols[k][i];
                    if ui == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        mm[(i, j)] += ui * e[k] * dh[j] * cols[k][j];
                    }
                }
            }
            let chol = mm.clone().cholesky();
            let solve_h = |v: &[f64]| -> Vec<f64> {
                let ev: Vec<f64> = v.iter().zip(&e).map(|(a, b)| a * b).collect();
                let mut t = DVector::<f64>::zeros(n);
                for k in 0..m {
                    for i in 0..n {
                        t[i] += dh[i] * cols[k][i] * ev[k];
                    }
                }
                let w = match &chol {
                    Some(c) => c.solve(&t),
                    None => mm.clone().lu().solve(&t).unwrap_or(t.clone()),
                };
                (0..m)
                    .map(|k| {
                        let corr: f64 = (0..n).map(|i| dh[i] * cols[k][i] * w[i]).sum();
                        ev[k] - e[k] * corr
                    })
                    .collect()
            };
            let h1 = solve_h(&g);
            let h2 = solve_h(&vec![1.0; m]);
            let nu = h1.iter().sum::<f64>() / h2.iter().sum::<f64>();
            let dy: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| -(a - nu * b)).collect();
            let dec2 = -dot(&g, &dy);
            if dec2 <= 1e-3 * mu || dec2 <= 1e-16 * f0 {
                break;
            }
            // fraction-to-boundary then backtracking
            let mut alpha: f64 = 1.0;
            for (v, dv) in y.iter().zip(&dy) {
                if *dv < 0.0 {
                    alpha = alpha.min(0.99 * v / -dv);
                }
            }
            let cur = phi(&y, mu);
            let slope = dot(&g, &dy);
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = y.iter().zip(&dy).map(|(v, dv)| v + alpha * dv).collect();
                let val = phi(&trial, mu);
                if val <= cur + 1e-4 * alpha * slope {
                    y = trial;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if mu <= mu_final {
            break;
        }
        mu = (mu * opts.barrier_decay).max(mu_final);
        if iters > 100 * opts.max_iter {
            return Err(Error::NoConvergence { iterations: iters, residual: mu });
        }
    }
    // renormalize against drift
    let s: f64 = y.iter().sum();
    y.iter_mut().for_each(|v| *v /= s);
    Ok((y, iters))
}

/// Primal active-set method over a fixed candidate list: damped Newton on the
/// current face, ratio-test drops, Frank-Wolfe entry of improving patterns,
/// and Caratheodory reduction to keep the face affinely independent.
pub(crate) struct ActiveSet<'p, 'a> {
    p: &'p P1<'a>,
    cands: Vec<ReusePattern>,
    y: Vec<f64>,
    kkt: f64,
}

/// Weights at or below this after the barrier phase start the crossover at zero.
const IDENTIFY_TOL: f64 = 1e-10;

impl<'p, 'a> ActiveSet<'p, 'a> {
    pub fn new(p: &'p P1<'a>, cands: &[ReusePattern], mut y: Vec<f64>) -> Self {
        let keep: f64 = y.iter().filter(|v| **v > IDENTIFY_TOL).sum();
        // only drop tiny weights if the rest stays stable
        let trimmed: Vec<f64> = y.iter().map(|v| if *v > IDENTIFY_TOL { v / keep } else { 0.0 }).collect();
        if strictly_stable(&p.rates(cands, &trimmed), p.lambda) {
            y = trimmed;
        }
        ActiveSet { p, cands: cands.to_vec(), y, kkt: f64::INFINITY }
    }

    pub fn kkt_residual(&self) -> f64 {
        self.kkt
    }

    pub fn allocation(&self) -> Allocation {
        let n = self.p.tbl.n();
        let mut x = vec![0.0; 1 << n];
        for (c, v) in self.cands.iter().zip(&self.y) {
            x[c.index()] += v.max(0.0);
        }
        let s: f64 = x.iter().sum();
        x.iter_mut().for_each(|v| *v /= s);
        Allocation::from_raw_unchecked(n, x)
    }

    fn face(&self) -> Vec<usize> {
        (0..self.y.len()).filter(|&k| self.y[k] > 0.0).collect()
    }

    pub fn solve(&mut self, opts: &SolverOptions) -> Result<usize> {
        let p = self.p;
        let mut iters = 0usize;
        self.purify();
        loop {
            iters += 1;
            if iters > opts.max_iter * 4 {
                return Err(Error::NoConvergence { iterations: iters, residual: self.kkt });
            }
            let r = p.rates(&self.cands, &self.y);
            let f = p.value(&r);
            let a = p.grad_r(&r);
            let h = p.hess_r(&r);
            let g: Vec<f64> = self.cands.iter().map(|c| dot(p.tbl.column(*c), &a)).collect();
            let face = self.face();
            let spread = face.iter().map(|&k| g[k]).fold(f64::NEG_INFINITY, f64::max)
                - face.iter().map(|&k| g[k]).fold(f64::INFINITY, f64::min);
            if spread > 0.1 * opts.tol * f {
                if let Some(dy) = self.face_newton(&face, &g, &h) {
                    let dec = -face.iter().zip(&dy).map(|(&k, d)| g[k] * d).sum::<f64>();
                    if dec > 1e-15 * f && self.newton_step(&face, &dy, f, -dec) {
                        continue;
                    }
                }
            }
            // face-optimal: price the remaining candidates
            let nu: f64 = face.iter().map(|&k| self.y[k] * g[k]).sum();
            let gmin = g.iter().cloned().fold(f64::INFINITY, f64::min);
            self.kkt = (nu - gmin).max(0.0) / f;
            let entering = (0..g.len())
                .filter(|k| self.y[*k] == 0.0)
                .min_by(|&i, &j| g[i].total_cmp(&g[j]).then(i.cmp(&j)));
            match entering {
                Some(k) if g[k] < nu - 0.1 * opts.tol * f => {
                    self.frank_wolfe_step(k);
                    self.purify();
                }
                _ => return Ok(iters),
            }
        }
    }

    /// Newton direction on the face with the sum constraint eliminated:
    /// `dy = Z w`, `Z = [I; -1^T]`.
    fn face_newton(&self, face: &[usize], g: &[f64], h: &[f64]) -> Option<Vec<f64>> {
        let q = face.len();
        if q < 2 {
            return None;
        }
        let n = self.p.tbl.n();
        // S_F scaled by sqrt(h): u_k = D^1/2 s_k
        let u: Vec<Vec<f64>> =
            face.iter().map(|&k| (0..n).map(|i| h[i].sqrt() * self.p.tbl.get(i, self.cands[k])).collect()).collect();
        let last = &u[q - 1];
        let z: Vec<Vec<f64>> = u[..q - 1].iter().map(|uk| uk.iter().zip(last).map(|(a, b)| a - b).collect()).collect();
        let mut hz = DMatrix::<f64>::zeros(q - 1, q - 1);
        for i in 0..q - 1 {
            for j in i..q - 1 {
                let v = dot(&z[i], &z[j]);
                hz[(i, j)] = v;
                hz[(j, i)] = v;
            }
        }
        let rhs = DVector::from_iterator(q - 1, (0..q - 1).map(|i| -(g[face[i]] - g[face[q - 1]])));
        let scale = hz.diagonal().amax().max(1e-300);
        let svd = hz.svd(true, true);
        let w = svd.solve(&rhs, 1e-13 * scale).ok()?;
        let mut dy: Vec<f64> = w.iter().copied().collect();
        dy.push(-w.sum());
        Some(dy)
    }

    fn newton_step(&mut self, face: &[usize], dy: &[f64], f: f64, slope: f64) -> bool {
        let p = self.p;
        let mut alpha_max = f64::INFINITY;
        let mut block = None;
        for (idx, &k) in face.iter().enumerate() {
            if dy[idx] < 0.0 {
                let a = self.y[k] / -dy[idx];
                if a < alpha_max {
                    alpha_max = a;
                    block = Some(k);
                }
            }
        }
        let mut alpha = alpha_max.min(1.0);
        for _ in 0..80 {
            let mut trial = self.y.clone();
            for (idx, &k) in face.iter().enumerate() {
                trial[k] += alpha * dy[idx];
            }
            let hits = alpha >= alpha_max;
            if hits {
                if let Some(b) = block {
                    trial[b] = 0.0;
                }
            }
            trial.iter_mut().for_each(|v| *v = v.max(0.0));
            let s: f64 = trial.iter().sum();
            trial.iter_mut().for_each(|v| *v /= s);
            let val = p.value(&p.rates(&self.cands, &trial));
            if val <= f + 1e-4 * alpha * slope || (val <= f && hits) {
                let moved = trial != self.y;
                self.y = trial;
                return moved;
            }
            alpha *= 0.5;
        }
        false
    }

    /// Moves mass toward candidate `k` with an exact line search on the
    /// segment `y + gamma (e_k - y)`.
    fn frank_wolfe_step(&mut self, k: usize) {
        let p = self.p;
        let point = |gamma: f64| -> Vec<f64> {
            let mut t: Vec<f64> = self.y.iter().map(|v| (1.0 - gamma) * v).collect();
            t[k] += gamma;
            t
        };
        let obj = |gamma: f64| p.value(&p.rates(&self.cands, &point(gamma)));
        // f is convex along the segment; golden-section on [0, hi]
        let mut hi = 1.0;
        while !obj(hi).is_finite() && hi > 1e-16 {
            hi *= 0.5;
        }
        let (mut lo_, mut hi_) = (0.0, hi);
        let gr = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = hi_ - gr * (hi_ - lo_);
        let mut d = lo_ + gr * (hi_ - lo_);
        let (mut fc, mut fd) = (obj(c), obj(d));
        for _ in 0..100 {
            if fc < fd {
                hi_ = d;
                d = c;
                fd = fc;
                c = hi_ - gr * (hi_ - lo_);
                fc = obj(c);
            } else {
                lo_ = c;
                c = d;
                fc = fd;
                d = lo_ + gr * (hi_ - lo_);
                fd = obj(d);
            }
            if hi_ - lo_ < 1e-15 {
                break;
            }
        }
        let gamma = 0.5 * (lo_ + hi_);
        let gamma = if gamma > 0.0 { gamma } else { 1e-12 };
        self.y = point(gamma);
    }

    /// Caratheodory reduction: while the face's lifted efficiency vectors
    /// `(s_B, 1)` are linearly dependent, move along the dependency (rates stay
    /// fixed) until a weight vanishes.
    fn purify(&mut self) {
        let n = self.p.tbl.n();
        loop {
            let face = self.face();
            let q = face.len();
            if q <= 1 {
                return;
            }
            let mut m = DMatrix::<f64>::zeros(n + 1, q);
            let mut col_scale = vec![0.0; q];
            for (c, &k) in face.iter().enumerate() {
                let s = self.p.tbl.column(self.cands[k]);
                let norm = (1.0 + dot(s, s)).sqrt();
                col_scale[c] = norm;
                for i in 0..n {
                    m[(i, c)] = s[i] / norm;
                }
                m[(n, c)] = 1.0 / norm;
            }
            let z = if q > n + 1 {
                // guaranteed dependency: take a null vector
                null_vector(&m)
            } else {
                let svd = m.clone().svd(false, true);
                let smax = svd.singular_values.max();
                let (imin, smin) = svd.singular_values.argmin();
                if smin > 1e-10 * smax {
                    return;
                }
                let vt = svd.v_t.unwrap();
                Some(vt.row(imin).iter().copied().collect())
            };
            let Some(mut z) = z else { return };
            // undo column scaling: m = S diag(1/norm), so null of S is z / norm
            for (zc, s) in z.iter_mut().zip(&col_scale) {
                *zc /= s;
            }
            if z.iter().all(|v| *v <= 0.0) {
                z.iter_mut().for_each(|v| *v = -*v);
            }
            let mut t = f64::INFINITY;
            let mut arg = 0;
            for (c, &k) in face.iter().enumerate() {
                if z[c] > 1e-300 {
                    let ratio = self.y[k] / z[c];
                    if ratio < t {
                        t = ratio;
                        arg = c;
                    }
                }
            }
            if !t.is_finite() {
                return;
            }
            let before = self.p.value(&self.p.rates(&self.cands, &self.y));
            let mut trial = self.y.clone();
            for (c, &k) in face.iter().enumerate() {
                trial[k] = (trial[k] - t * z[c]).max(0.0);
            }
            trial[face[arg]] = 0.0;
            let s: f64 = trial.iter().sum();
            trial.iter_mut().for_each(|v| *v /= s);
            let after = self.p.value(&self.p.rates(&self.cands, &trial));
            if !(after <= before * (1.0 + 1e-12)) {
                return;
            }
            self.y = trial;
        }
    }
}

fn null_vector(m: &DMatrix<f64>) -> Option<Vec<f64>> {
    // pad to square so the full right-singular basis is available
    let (rows, cols) = m.shape();
    let mut sq = DMatrix::<f64>::zeros(cols, cols);
    sq.view_mut((0, 0), (rows, cols)).copy_from(m);
    let svd = sq.svd(false, true);
    let (imin, _) = svd.singular_values.argmin();
    let vt = svd.v_t?;
    Some(vt.row(imin).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table2(a: f64, b: f64, c: f64, d: f64) -> EfficiencyTable {
        EfficiencyTable::from_fn(2, |i, p| match (i, p.bits()) {
            (0, 1) => a,
            (1, 2) => b,
            (0, 3) => c,
            (1, 3) => d,
            _ => unreachable!(),
        })
        .unwrap()
    }

    #[test]
    fn mm1_single_cell() {
        let t = EfficiencyTable::from_fn(1, |_, _| 20.0).unwrap();
        let rep = conservative_delay(&Allocation::full_reuse(1), &t, &[10.0]).unwrap();
        assert!((rep.sojourn[0].unwrap() - 0.1).abs() < 1e-15);
        assert!((rep.average - 0.1).abs() < 1e-15);
        let rep = conservative_delay(&Allocation::full_reuse(1), &t, &[1e-12]).unwrap();
        assert!((rep.sojourn[0].unwrap() - 1.0 / 20.0).abs() < 1e-12);
    }

    #[test]
    fn rates_for_reference_allocations() {
        let t = table2(40.0, 30.0, 15.0, 12.0);
        assert_eq!(conservative_rates(&Allocation::full_reuse(2), &t), vec![15.0, 12.0]);
        assert_eq!(conservative_rates(&Allocation::uniform_orthogonal(2), &t), vec![20.0, 15.0]);
    }

    #[test]
    fn weighted_average_by_hand() {
        let t = table2(40.0, 30.0, 15.0, 12.0);
        let x = Allocation::uniform_orthogonal(2);
        let rep = conservative_delay(&x, &t, &[10.0, 5.0]).unwrap();
        // t1 = 1/10, t2 = 1/10, T = (10*0.1 + 5*0.1)/15
        assert!((rep.average - 0.1).abs() < 1e-15);
        let rep = conservative_delay(&x, &t, &[15.0, 5.0]).unwrap();
        let expect = (15.0 * 0.2 + 5.0 * 0.1) / 20.0;
        assert!((rep.average - expect).abs() < 1e-15);
    }

    #[test]
    fn unstable_cell_is_named() {
        let t = table2(40.0, 30.0, 15.0, 12.0);
        match conservative_delay(&Allocation::full_reuse(2), &t, &[10.0, 12.0]) {
            Err(Error::Unstable { cell: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_cell_optimum() {
        let t = EfficiencyTable::from_fn(1, |_, _| 20.0).unwrap();
        let sol = solve_p1(&t, &[10.0], &SolverOptions::default()).unwrap();
        assert_eq!(sol.allocation.get(ReusePattern(1)), 1.0);
        assert!((sol.objective - 0.1).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_splits_evenly() {
        let t = table2(40.0, 40.0, 12.0, 12.0);
        let sol = solve_p1(&t, &[10.0, 10.0], &SolverOptions::default()).unwrap();
        let x = &sol.allocation;
        assert!((x.get(ReusePattern(1)) - x.get(ReusePattern(2))).abs() < 1e-9);
        assert!((x.get(ReusePattern(1)) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn full_reuse_optimal_stops_after_one_round() {
        // reuse nearly free of interference: full reuse dominates
        let t = table2(40.0, 40.0, 39.0, 39.0);
        let res = algorithm1(&t, &[5.0, 5.0], &SolverOptions::default()).unwrap();
        assert_eq!(res.iterations(), 1);
        assert_eq!(res.allocation.get(ReusePattern(3)), 1.0);
    }

    #[test]
    fn infeasible_reports_margin() {
        let t = table2(40.0, 40.0, 10.0, 10.0);
        match solve_p1(&t, &[30.0, 30.0], &SolverOptions::default()) {
            Err(Error::Infeasible { margin }) => assert!((margin - 2.0 / 3.0).abs() < 1e-5, "{margin}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let t = table2(40.0, 35.0, 15.0, 12.0);
        let lambda = [6.0, 4.0];
        let x = Allocation::new(2, vec![0.0, 0.3, 0.3, 0.4]).unwrap();
        let g = pattern_gradient(&x, &t, &lambda);
        let p = P1::new(&t, &lambda);
        for b in 1..4 {
            let h = 1e-6;
            let mut up = x.as_slice().to_vec();
            let mut dn = up.clone();
            up[b] += h;
            dn[b] -= h;
            let fu = p.value(&rates_of(&t, &up));
            let fd = p.value(&rates_of(&t, &dn));
            let fdg = (fu - fd) / (2.0 * h);
            assert!((fdg - g[b]).abs() <= 1e-6 * g[b].abs(), "{b}: {fdg} vs {}", g[b]);
        }
    }

    fn rates_of(t: &EfficiencyTable, x: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; t.n()];
        for (b, w) in x.iter().enumerate() {
            for i in 0..t.n() {
                r[i] += t.get(i, ReusePattern(b as u32)) * w;
            }
        }
        r
    }
}
