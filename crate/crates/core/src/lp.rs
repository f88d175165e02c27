//! Dense two-phase simplex method and the throughput-region feasibility
//! programs built on it.
//!
//! Problems here have `n + 1` rows and up to `2^n + 2n` columns, so a full
//! tableau is cheap.

use crate::allocation::Allocation;
use crate::network::EfficiencyTable;
use crate::pattern::ReusePattern;

const PIVOT_TOL: f64 = 1e-11;
const FEAS_TOL: f64 = 1e-9;
/// Switch from Dantzig's rule to Bland's rule after this many consecutive
/// degenerate pivots.
const DEGENERATE_LIMIT: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, objective: f64 },
    Infeasible,
    Unbounded,
}

/// Minimizes `c.x` subject to `A x = b`, `x >= 0`. `a` is row-major.
pub fn minimize(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> LpOutcome {
    let m = a.len();
    let nv = c.len();
    debug_assert!(a.iter().all(|r| r.len() == nv) && b.len() == m);
    // Tableau columns: nv structural, m artificial, 1 rhs.
    let width = nv + m + 1;
    let mut t = vec![vec![0.0; width]; m];
    for r in 0..m {
        let sign = if b[r] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..nv {
            t[r][j] = sign * a[r][j];
        }
        t[r][nv + r] = 1.0;
        t[r][width - 1] = sign * b[r];
    }
    let mut basis: Vec<usize> = (nv..nv + m).collect();

    // phase 1: minimize the sum of artificials
    let mut cost1 = vec![0.0; nv + m];
    cost1[nv..].iter_mut().for_each(|v| *v = 1.0);
    if run_simplex(&mut t, &mut basis, &cost1, nv + m).is_err() {
        return LpOutcome::Infeasible;
    }
    let infeas: f64 = basis.iter().zip(&t).filter(|(bj, _)| **bj >= nv).map(|(_, row)| row[width - 1]).sum();
    let scale = 1.0 + b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if infeas > FEAS_TOL * scale {
        return LpOutcome::Infeasible;
    }
    // drive zero-level artificials out of the basis where possible
    for r in 0..m {
        if basis[r] >= nv {
            if let Some(j) = (0..nv).find(|&j| t[r][j].abs() > 1e-9) {
                pivot(&mut t, r, j);
                basis[r] = j;
            }
        }
    }
    // phase 2 over structural columns only
    let mut cost2 = c.to_vec();
    cost2.extend(std::iter::repeat(0.0).take(m));
    if run_simplex(&mut t, &mut basis, &cost2, nv).is_err() {
        return LpOutcome::Unbounded;
    }
    let mut x = vec![0.0; nv];
    for (r, &bj) in basis.iter().enumerate() {
        if bj < nv {
            x[bj] = t[r][width - 1].max(0.0);
        }
    }
    let objective = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    LpOutcome::Optimal { x, objective }
}

struct Unbounded;

/// Primal simplex on an already-feasible tableau. Only the first `enter_limit`
/// columns may enter the basis.
fn run_simplex(t: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], enter_limit: usize) -> Result<(), Unbounded> {
    let m = t.len();
    if m == 0 {
        return Ok(());
    }
    let width = t[0].len();
    let mut degenerate = 0usize;
    let max_iter = 50 * (width + m) + 1000;
    for _ in 0..max_iter {
        // reduced costs
        let mut duals_cost = vec![0.0; m];
        for r in 0..m {
            duals_cost[r] = cost[basis[r]];
        }
        let reduced = |j: usize| -> f64 { cost[j] - (0..m).map(|r| duals_cost[r] * t[r][j]).sum::<f64>() };
        let bland = degenerate >= DEGENERATE_LIMIT;
        let mut enter = None;
        let mut best = -1e-10;
        for j in 0..enter_limit {
            if basis.contains(&j) {
                continue;
            }
            let d = reduced(j);
            if bland {
                if d < -1e-10 {
                    enter = Some(j);
                    break;
                }
            } else if d < best {
                best = d;
                enter = Some(j);
            }
        }
        let Some(j) = enter else { return Ok(()) };
        // ratio test, ties by smallest basis index (Bland)
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..m {
            if t[r][j] > PIVOT_TOL {
                let ratio = t[r][width - 1] / t[r][j];
                match leave {
                    None => leave = Some((r, ratio)),
                    Some((lr, lratio)) => {
                        if ratio < lratio - 1e-12 || (ratio <= lratio + 1e-12 && basis[r] < basis[lr]) {
                            leave = Some((r, ratio));
                        }
                    }
                }
            }
        }
        let Some((r, ratio)) = leave else { return Err(Unbounded) };
        degenerate = if ratio.abs() < 1e-12 { degenerate + 1 } else { 0 };
        pivot(t, r, j);
        basis[r] = j;
    }
    Ok(())
}

fn pivot(t: &mut [Vec<f64>], r: usize, j: usize) {
    let p = t[r][j];
    t[r].iter_mut().for_each(|v| *v /= p);
    let row = t[r].clone();
    for (k, other) in t.iter_mut().enumerate() {
        if k != r {
            let f = other[j];
            if f != 0.0 {
                other.iter_mut().zip(&row).for_each(|(v, w)| *v -= f * w);
            }
        }
    }
}

/// Phase-1 feasibility: an allocation with `r_i >= target_i` for every cell,
/// if one exists. The result is a basic solution (at most `n + 1` active
/// patterns). Cells with a zero target impose no constraint.
pub fn supports_rates(tbl: &EfficiencyTable, target: &[f64]) -> Option<Allocation> {
    let n = tbl.n();
    let rows: Vec<usize> = (0..n).filter(|&i| target[i] > 0.0).collect();
    let patterns: Vec<ReusePattern> = ReusePattern::all(n).skip(1).collect();
    let np = patterns.len();
    let nv = np + rows.len();
    let mut a = Vec::with_capacity(rows.len() + 1);
    let mut b = Vec::with_capacity(rows.len() + 1);
    for (k, &i) in rows.iter().enumerate() {
        let mut row = vec![0.0; nv];
        for (j, p) in patterns.iter().enumerate() {
            row[j] = tbl.get(i, *p);
        }
        row[np + k] = -1.0;
        a.push(row);
        b.push(target[i]);
    }
    let mut sum = vec![0.0; nv];
    sum[..np].iter_mut().for_each(|v| *v = 1.0);
    a.push(sum);
    b.push(1.0);
    match minimize(&vec![0.0; nv], &a, &b) {
        LpOutcome::Optimal { x, .. } => Some(to_allocation(n, &patterns, &x[..np])),
        _ => None,
    }
}

/// Direct LP for the largest `rho` such that `rho * lambda` is supportable,
/// with the maximizing allocation. `None` for `rho` when `lambda = 0`
/// (unbounded margin).
pub fn max_margin(tbl: &EfficiencyTable, lambda: &[f64]) -> (Option<f64>, Allocation) {
    let n = tbl.n();
    let rows: Vec<usize> = (0..n).filter(|&i| lambda[i] > 0.0).collect();
    if rows.is_empty() {
        return (None, Allocation::full_reuse(n));
    }
    let patterns: Vec<ReusePattern> = ReusePattern::all(n).skip(1).collect();
    let np = patterns.len();
    // columns: patterns, rho, surplus per row
    let nv = np + 1 + rows.len();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (k, &i) in rows.iter().enumerate() {
        let mut row = vec![0.0; nv];
        for (j, p) in patterns.iter().enumerate() {
            row[j] = tbl.get(i, *p);
        }
        row[np] = -lambda[i];
        row[np + 1 + k] = -1.0;
        a.push(row);
        b.push(0.0);
    }
    let mut sum = vec![0.0; nv];
    sum[..np].iter_mut().for_each(|v| *v = 1.0);
    a.push(sum);
    b.push(1.0);
    let mut c = vec![0.0; nv];
    c[np] = -1.0;
    match minimize(&c, &a, &b) {
        LpOutcome::Optimal { x, .. } => (Some(x[np]), to_allocation(n, &patterns, &x[..np])),
        // rho = 0, x arbitrary is always feasible and rho <= min s_i/lambda_i
        other => unreachable!("margin LP is feasible and bounded, got {other:?}"),
    }
}

fn to_allocation(n: usize, patterns: &[ReusePattern], w: &[f64]) -> Allocation {
    let mut x = vec![0.0; 1 << n];
    for (p, v) in patterns.iter().zip(w) {
        x[p.index()] = v.max(0.0);
    }
    let s: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= s);
    Allocation::from_raw_unchecked(n, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_lp() {
        // min -x - y  s.t. x + 2y + s1 = 4, 3x + y + s2 = 6
        let c = [-1.0, -1.0, 0.0, 0.0];
        let a = vec![vec![1.0, 2.0, 1.0, 0.0], vec![3.0, 1.0, 0.0, 1.0]];
        match minimize(&c, &a, &[4.0, 6.0]) {
            LpOutcome::Optimal { x, objective } => {
                assert!((x[0] - 1.6).abs() < 1e-12 && (x[1] - 1.2).abs() < 1e-12);
                assert!((objective + 2.8).abs() < 1e-12);
            }
            o => panic!("{o:?}"),
        }
    }

    #[test]
    fn infeasible_and_unbounded() {
        // x + y = -1 with x, y >= 0
        assert_eq!(minimize(&[0.0, 0.0], &[vec![1.0, 1.0]], &[-1.0]), LpOutcome::Infeasible);
        // min -x s.t. x - y = 0
        assert_eq!(minimize(&[-1.0, 0.0], &[vec![1.0, -1.0]], &[0.0]), LpOutcome::Unbounded);
    }

    #[test]
    fn margin_of_single_cell() {
        let t = EfficiencyTable::from_fn(1, |_, _| 20.0).unwrap();
        let (rho, x) = max_margin(&t, &[5.0]);
        assert!((rho.unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(x.get(ReusePattern(1)), 1.0);
        assert!(supports_rates(&t, &[19.0]).is_some());
        assert!(supports_rates(&t, &[21.0]).is_none());
    }

    #[test]
    fn phase_one_solution_is_basic() {
        let t = EfficiencyTable::from_fn(3, |i, a| 30.0 / a.len() as f64 + i as f64).unwrap();
        let x = supports_rates(&t, &[5.0, 6.0, 7.0]).unwrap();
        assert!(x.support().len() <= 4);
        for i in 0..3 {
            let r: f64 = x.nonzero().map(|(p, v)| t.get(i, p) * v).sum();
            assert!(r >= [5.0, 6.0, 7.0][i] - 1e-9);
        }
    }
}
