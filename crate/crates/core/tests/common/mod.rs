#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specalloc::baselines::throughput_margin;
use specalloc::network::TrafficConfig;
use specalloc::{build_scenario, build_table, Allocation, EfficiencyTable, ReusePattern, ScenarioConfig};

pub struct Instance {
    pub table: EfficiencyTable,
    pub lambda: Vec<f64>,
    /// Throughput margin of `lambda`.
    pub margin: f64,
}

/// Interference-coupled table: `s[i, A] = s_i * prod_{j in A, j != i} (1 - c_ij)`.
pub fn coupled_table(n: usize, rng: &mut impl Rng) -> EfficiencyTable {
    let peak: Vec<f64> = (0..n).map(|_| rng.random_range(10.0..60.0)).collect();
    let c: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..0.7)).collect()).collect();
    EfficiencyTable::from_fn(n, |i, a| {
        a.members().filter(|&j| j != i).fold(peak[i], |acc, j| acc * (1.0 - c[i][j]))
    })
    .unwrap()
}

/// Hex-drop network table with proportional arrival direction.
pub fn network_table(n: usize, seed: u64) -> (EfficiencyTable, Vec<f64>) {
    let cfg = ScenarioConfig::hex_drop(n, seed, TrafficConfig::ProportionalWorstCase { mean: 1.0 });
    let sc = build_scenario(&cfg).unwrap();
    (build_table(&sc).unwrap(), sc.arrival_rates)
}

/// Random instance with `n` cells, arrivals at `util` times the region
/// boundary along a random direction. Alternates network and synthetic tables.
pub fn instance(n: usize, seed: u64, util: f64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (table, dir): (EfficiencyTable, Vec<f64>) = if seed % 2 == 0 {
        let (t, d) = network_table(n, seed);
        let d: Vec<f64> = d.iter().map(|v| v * rng.random_range(0.5..1.5)).collect();
        (t, d)
    } else {
        let t = coupled_table(n, &mut rng);
        (t, (0..n).map(|_| rng.random_range(0.2..1.0)).collect())
    };
    let m = throughput_margin(&table, &dir);
    let lambda: Vec<f64> = dir.iter().map(|d| d * m * util).collect();
    let margin = throughput_margin(&table, &lambda);
    Instance { table, lambda, margin }
}

pub fn rates_loop(tbl: &EfficiencyTable, x: &Allocation) -> Vec<f64> {
    let n = tbl.n();
    let mut r = vec![0.0; n];
    for b in 0..(1u32 << n) {
        for (i, ri) in r.iter_mut().enumerate() {
            *ri += tbl.get(i, ReusePattern(b)) * x.as_slice()[b as usize];
        }
    }
    r
}

/// Conservative objective from scratch.
pub fn mm1_average(tbl: &EfficiencyTable, x: &Allocation, lambda: &[f64]) -> f64 {
    let r = rates_loop(tbl, x);
    let total: f64 = lambda.iter().sum();
    let mut acc = 0.0;
    for i in 0..tbl.n() {
        if lambda[i] > 0.0 {
            if r[i] <= lambda[i] {
                return f64::INFINITY;
            }
            acc += lambda[i] / (r[i] - lambda[i]);
        }
    }
    acc / total
}

/// Certified bracket on the throughput margin via multiplicative weights on
/// the zero-sum game `max_x min_i (S x)_i / lambda_i`.
pub fn margin_bracket(tbl: &EfficiencyTable, lambda: &[f64], rounds: usize) -> (f64, f64) {
    let n = tbl.n();
    let rows: Vec<usize> = (0..n).filter(|&i| lambda[i] > 0.0).collect();
    let pats: Vec<ReusePattern> = ReusePattern::all(n).skip(1).collect();
    let pay = |i: usize, p: ReusePattern| tbl.get(i, p) / lambda[i];
    let scale = rows.iter().flat_map(|&i| pats.iter().map(move |&p| (i, p))).map(|(i, p)| pay(i, p)).fold(0.0, f64::max);
    let eta = (8.0 * (rows.len() as f64).ln().max(1.0) / rounds as f64).sqrt();
    let mut w = vec![1.0; rows.len()];
    let mut xbar = vec![0.0; pats.len()];
    let mut wbar = vec![0.0; rows.len()];
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for _ in 0..rounds {
        let tot: f64 = w.iter().sum();
        let wn: Vec<f64> = w.iter().map(|v| v / tot).collect();
        // best response pattern against the row mix
        let (bi, bv) = pats
            .iter()
            .enumerate()
            .map(|(k, &p)| (k, rows.iter().zip(&wn).map(|(&i, wi)| wi * pay(i, p)).sum::<f64>()))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        hi = hi.min(bv);
        xbar[bi] += 1.0;
        for (k, wk) in wbar.iter_mut().enumerate() {
            *wk += wn[k];
        }
        for (k, &i) in rows.iter().enumerate() {
            w[k] *= (-eta * pay(i, pats[bi]) / scale).exp();
        }
        let tw: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= tw);
    }
    let tx: f64 = xbar.iter().sum();
    let lo_avg = rows
        .iter()
        .map(|&i| pats.iter().zip(&xbar).map(|(&p, xv)| pay(i, p) * xv / tx).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    lo = lo.max(lo_avg);
    let tw: f64 = wbar.iter().sum();
    let hi_avg = pats
        .iter()
        .map(|&p| rows.iter().zip(&wbar).map(|(&i, wv)| wv / tw * pay(i, p)).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi.min(hi_avg))
}

pub fn random_simplex_point(n: usize, rng: &mut impl Rng, support: &[ReusePattern]) -> Allocation {
    let w: Vec<(ReusePattern, f64)> = support.iter().map(|&p| (p, -rng.random_range(1e-9f64..1.0).ln())).collect();
    Allocation::from_weights(n, &w).unwrap()
}
