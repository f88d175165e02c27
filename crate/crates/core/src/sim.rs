//! Event-driven simulation of the coupled queues and an exact solver for the
//! truncated queue-length chain of very small networks.
//!
//! The simulated process is the continuous-time chain on queue-length
//! vectors: packets arrive to cell `i` at rate `lambda_i` and the head packet
//! of a busy cell leaves at rate `r_{i,A}`, where `A` is the set of busy
//! cells. Potential departures are generated at the constant rate
//! `max_A r_{i,A}` and thinned, so together with the arrivals the event rate
//! is the uniformization constant `sum_i lambda_i + sum_i max_A r_{i,A}`; the
//! horizon counts those events. Arrivals and service draws use separate
//! random streams so different allocations see identical arrivals.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::allocation::Allocation;
use crate::conservative::check_lambda;
use crate::error::{Error, Result};
use crate::network::EfficiencyTable;
use crate::pattern::ReusePattern;
use crate::refined::{refined_rates, RefinedRates};

const ARRIVAL_STREAM: u64 = 1;
const SERVICE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Number of events (arrivals plus potential departures) to simulate.
    pub horizon: u64,
    /// Events discarded before statistics are collected; defaults to 10%.
    pub warmup: Option<u64>,
    /// Batches for the batch-means standard errors.
    pub batches: usize,
    pub seed: u64,
}

impl SimOptions {
    pub fn new(horizon: u64, seed: u64) -> Self {
        SimOptions { horizon, warmup: None, batches: 20, seed }
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup.unwrap_or(self.horizon / 10)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// Mean sojourn time per cell over packets that left after warmup.
    pub sojourn: Vec<Option<f64>>,
    /// Batch-means standard error of `sojourn`.
    pub stderr: Vec<Option<f64>>,
    /// Mean over all packets of all cells.
    pub average: Option<f64>,
    pub average_stderr: Option<f64>,
    /// Fraction of time each queue is nonempty.
    pub utilization: Vec<f64>,
    /// Time-weighted queue-length CDF per cell, index = length.
    pub queue_cdf: Vec<Vec<f64>>,
    /// Queue-length CDF of a uniformly chosen cell.
    pub pooled_cdf: Vec<f64>,
    pub packets_served: Vec<u64>,
    pub horizon: u64,
    pub warmup: u64,
    /// Simulated time after warmup, seconds.
    pub measured_time: f64,
    pub seed: u64,
    /// Some cell has `r_{i,N} <= lambda_i`; statistics are not stationary.
    pub unstable: bool,
}

pub fn utilization(res: &SimResult) -> Vec<f64> {
    res.utilization.clone()
}

struct Batches {
    sums: Vec<Vec<f64>>,
    counts: Vec<Vec<u64>>,
}

impl Batches {
    fn new(n: usize, b: usize) -> Self {
        Batches { sums: vec![vec![0.0; b]; n], counts: vec![vec![0; b]; n] }
    }

    fn record(&mut self, i: usize, batch: usize, v: f64) {
        self.sums[i][batch] += v;
        self.counts[i][batch] += 1;
    }

    fn mean_and_se<'a>(sums: impl Iterator<Item = (f64, u64)> + 'a, per: impl Iterator<Item = (f64, u64)>) -> (Option<f64>, Option<f64>) {
        let (s, c) = sums.fold((0.0, 0u64), |a, b| (a.0 + b.0, a.1 + b.1));
        if c == 0 {
            return (None, None);
        }
        let means: Vec<f64> = per.filter(|(_, c)| *c > 0).map(|(s, c)| s / c as f64).collect();
        let se = if means.len() >= 2 {
            let m = means.iter().sum::<f64>() / means.len() as f64;
            let var = means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (means.len() - 1) as f64;
            Some((var / means.len() as f64).sqrt())
        } else {
            None
        };
        (Some(s / c as f64), se)
    }
}

fn validate(opts: &SimOptions) -> Result<u64> {
    let warmup = opts.warmup_steps();
    if warmup >= opts.horizon || opts.horizon - warmup < opts.batches.max(1) as u64 {
        return Err(Error::Horizon { horizon: opts.horizon, warmup });
    }
    Ok(warmup)
}

fn exp(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    let e: f64 = rng.sample(Exp1);
    e / rate
}

/// Peak departure rate per cell, `max_A r_{i,A}` over busy sets holding `i`.
fn peak_rates(rates: &RefinedRates) -> Vec<f64> {
    let n = rates.n();
    (0..n)
        .map(|i| ReusePattern::all(n).filter(|a| a.contains(i)).map(|a| rates.get(i, a)).fold(0.0, f64::max))
        .collect()
}

/// Simulates the coupled queues under allocation `x`.
pub fn simulate(x: &Allocation, tbl: &EfficiencyTable, lambda: &[f64], opts: &SimOptions) -> Result<SimResult> {
    check_lambda(tbl, lambda)?;
    let warmup = validate(opts)?;
    let rates = refined_rates(x, tbl)?;
    let n = tbl.n();
    let peak = peak_rates(&rates);
    let service_total: f64 = peak.iter().sum();
    let unstable = (0..n).any(|i| lambda[i] > 0.0 && rates.worst(i) <= lambda[i]);

    let mut arr_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    arr_rng.set_stream(ARRIVAL_STREAM);
    let mut svc_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    svc_rng.set_stream(SERVICE_STREAM);

    let mut next_arrival: Vec<f64> =
        lambda.iter().map(|&l| if l > 0.0 { exp(&mut arr_rng, l) } else { f64::INFINITY }).collect();
    let mut next_service = if service_total > 0.0 { exp(&mut svc_rng, service_total) } else { f64::INFINITY };

    let nb = opts.batches.max(1);
    let measured = opts.horizon - warmup;
    let mut queues: Vec<VecDeque<f64>> = vec![VecDeque::new(); n];
    let mut busy = ReusePattern::EMPTY;
    let mut hist: Vec<Vec<f64>> = vec![vec![0.0]; n];
    let mut busy_time = vec![0.0; n];
    let mut batches = Batches::new(n, nb);
    let mut served = vec![0u64; n];
    let mut now = 0.0;
    let mut t_start = f64::NAN;

    for step in 0..opts.horizon {
        let (cell, t_arr) =
            next_arrival.iter().copied().enumerate().fold((usize::MAX, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        let t_next = t_arr.min(next_service);
        if !t_next.is_finite() {
            // nothing can ever happen: all queues stay empty
            if t_start.is_nan() {
                t_start = now;
            }
            break;
        }
        let recording = step >= warmup;
        if recording {
            if t_start.is_nan() {
                t_start = now;
            }
            let dt = t_next - now;
            for i in 0..n {
                let l = queues[i].len();
                if hist[i].len() <= l {
                    hist[i].resize(l + 1, 0.0);
                }
                hist[i][l] += dt;
                if l > 0 {
                    busy_time[i] += dt;
                }
            }
        }
        now = t_next;
        if t_arr <= next_service {
            queues[cell].push_back(now);
            busy = busy.with(cell);
            next_arrival[cell] = now + exp(&mut arr_rng, lambda[cell]);
        } else {
            let pick = svc_rng.random::<f64>() * service_total;
            let u: f64 = svc_rng.random();
            next_service = now + exp(&mut svc_rng, service_total);
            let mut acc = 0.0;
            let mut i = n - 1;
            for (k, p) in peak.iter().enumerate() {
                acc += p;
                if pick < acc {
                    i = k;
                    break;
                }
            }
            if !queues[i].is_empty() && u * peak[i] < rates.get(i, busy) {
                let arrived = queues[i].pop_front().unwrap();
                if queues[i].is_empty() {
                    busy = busy.without(i);
                }
                if recording {
                    let batch = (((step - warmup) as u128 * nb as u128) / measured as u128) as usize;
                    batches.record(i, batch.min(nb - 1), now - arrived);
                    served[i] += 1;
                }
            }
        }
    }
    let elapsed = if t_start.is_nan() { 0.0 } else { now - t_start };

    let mut sojourn = Vec::with_capacity(n);
    let mut stderr = Vec::with_capacity(n);
    for i in 0..n {
        let (m, se) = Batches::mean_and_se(
            batches.sums[i].iter().copied().zip(batches.counts[i].iter().copied()),
            batches.sums[i].iter().copied().zip(batches.counts[i].iter().copied()),
        );
        sojourn.push(m);
        stderr.push(se);
    }
    let pooled = (0..nb).map(|b| {
        ((0..n).map(|i| batches.sums[i][b]).sum::<f64>(), (0..n).map(|i| batches.counts[i][b]).sum::<u64>())
    });
    let (average, average_stderr) = Batches::mean_and_se(pooled.clone(), pooled);

    let (queue_cdf, utilization): (Vec<Vec<f64>>, Vec<f64>) = (0..n)
        .map(|i| {
            let total: f64 = hist[i].iter().sum();
            if total <= 0.0 {
                return (vec![1.0], 0.0);
            }
            let mut acc = 0.0;
            let cdf = hist[i]
                .iter()
                .map(|h| {
                    acc += h / total;
                    acc
                })
                .collect();
            (cdf, busy_time[i] / total)
        })
        .unzip();
    let longest = queue_cdf.iter().map(|c| c.len()).max().unwrap_or(1);
    let pooled_cdf = (0..longest)
        .map(|l| queue_cdf.iter().map(|c| c.get(l).copied().unwrap_or(1.0)).sum::<f64>() / n as f64)
        .collect();

    Ok(SimResult {
        sojourn,
        stderr,
        average,
        average_stderr,
        utilization,
        queue_cdf,
        pooled_cdf,
        packets_served: served,
        horizon: opts.horizon,
        warmup,
        measured_time: elapsed,
        seed: opts.seed,
        unstable,
    })
}

/// Outcome of running the coupled queues and the same system frozen at
/// worst-case rates on one shared sample path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingResult {
    pub events: u64,
    /// Events after which some `l_i(t) > lbar_i(t)`.
    pub violations: u64,
    /// Largest `lbar_i - l_i` seen.
    pub max_gap: u64,
}

/// Drives both systems with common arrivals and common service uniforms:
/// cell `i`'s head packet leaves when `u * max_A r_{i,A}` falls below the
/// current rate, `r_{i,A(t)}` in the coupled system and `r_{i,N}` in the
/// frozen one.
pub fn coupled_monotonicity(
    x: &Allocation,
    tbl: &EfficiencyTable,
    lambda: &[f64],
    events: u64,
    seed: u64,
) -> Result<CouplingResult> {
    check_lambda(tbl, lambda)?;
    let rates = refined_rates(x, tbl)?;
    let n = tbl.n();
    let peak = peak_rates(&rates);
    let total = lambda.iter().sum::<f64>() + peak.iter().sum::<f64>();
    if total <= 0.0 {
        return Ok(CouplingResult { events: 0, violations: 0, max_gap: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let full = ReusePattern::full(n);
    let mut l = vec![0u64; n];
    let mut lbar = vec![0u64; n];
    let mut out = CouplingResult { events, violations: 0, max_gap: 0 };
    for _ in 0..events {
        let mut pick = rng.random::<f64>() * total;
        let u: f64 = rng.random();
        let mut handled = false;
        for i in 0..n {
            if pick < lambda[i] {
                l[i] += 1;
                lbar[i] += 1;
                handled = true;
                break;
            }
            pick -= lambda[i];
        }
        if !handled {
            let i = (0..n)
                .find(|&i| {
                    let hit = pick < peak[i];
                    pick -= peak[i];
                    hit
                })
                .unwrap_or(n - 1);
            let busy = ReusePattern::from_indices((0..n).filter(|&j| l[j] > 0));
            if l[i] > 0 && u * peak[i] < rates.get(i, busy) {
                l[i] -= 1;
            }
            if lbar[i] > 0 && u * peak[i] < rates.get(i, full) {
                lbar[i] -= 1;
            }
        }
        if (0..n).any(|i| l[i] > lbar[i]) {
            out.violations += 1;
        }
        out.max_gap = out.max_gap.max((0..n).map(|i| lbar[i].saturating_sub(l[i])).max().unwrap_or(0));
    }
    Ok(out)
}

/// Stationary law of the queue-length chain truncated at `cap` packets per
/// cell (arrivals to a full queue are lost).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactDelay {
    pub sojourn: Vec<Option<f64>>,
    pub queue_length: Vec<f64>,
    /// Probability that some queue sits at the cap.
    pub truncation_mass: f64,
    pub cap: usize,
}

const TRUNCATION_LIMIT: f64 = 1e-8;

/// Exact mean sojourn times of the original coupled queues (up to the
/// truncation), for networks of at most three cells.
pub fn exact_small_delay(x: &Allocation, tbl: &EfficiencyTable, lambda: &[f64], cap: usize) -> Result<ExactDelay> {
    check_lambda(tbl, lambda)?;
    let n = tbl.n();
    if n > 3 {
        return Err(Error::ExponentialSize { n, cap: 3 });
    }
    if cap == 0 {
        return Err(Error::Truncation { mass: 1.0, cap });
    }
    let rates = refined_rates(x, tbl)?;
    for i in 0..n {
        if lambda[i] > 0.0 && rates.worst(i) <= lambda[i] {
            return Err(Error::Unstable { cell: i, rate: rates.worst(i), arrival: lambda[i] });
        }
    }
    let pi = if n <= 2 { level_reduction(&rates, lambda, cap)? } else { gauss_seidel(&rates, lambda, cap)? };
    let side = cap + 1;
    let mut queue_length = vec![0.0; n];
    let mut at_cap = vec![0.0; n];
    let mut truncation_mass = 0.0;
    for (s, &p) in pi.iter().enumerate() {
        let l = decode(s, n, side);
        let mut edge = false;
        for i in 0..n {
            queue_length[i] += p * l[i] as f64;
            if l[i] == cap {
                at_cap[i] += p;
                edge = true;
            }
        }
        if edge {
            truncation_mass += p;
        }
    }
    if truncation_mass >= TRUNCATION_LIMIT {
        return Err(Error::Truncation { mass: truncation_mass, cap });
    }
    let sojourn = (0..n)
        .map(|i| (lambda[i] > 0.0).then(|| queue_length[i] / (lambda[i] * (1.0 - at_cap[i]))))
        .collect();
    Ok(ExactDelay { sojourn, queue_length, truncation_mass, cap })
}

fn decode(mut s: usize, n: usize, side: usize) -> Vec<usize> {
    let mut l = vec![0; n];
    for li in l.iter_mut() {
        *li = s % side;
        s /= side;
    }
    l
}

fn busy_set(l: &[usize]) -> ReusePattern {
    ReusePattern::from_indices(l.iter().enumerate().filter(|(_, v)| **v > 0).map(|(i, _)| i))
}

/// Direct solve for `n <= 2`: the generator is block tridiagonal in the
/// first queue's length, eliminated level by level from the top.
fn level_reduction(rates: &RefinedRates, lambda: &[f64], cap: usize) -> Result<Vec<f64>> {
    let n = rates.n();
    let side = cap + 1;
    let inner = if n == 2 { side } else { 1 };
    // generator blocks of level a: within-level D_a, down L_a (a -> a-1)
    let block = |a: usize| -> (DMatrix<f64>, DVector<f64>) {
        let mut d = DMatrix::<f64>::zeros(inner, inner);
        let mut down = DVector::<f64>::zeros(inner);
        for b in 0..inner {
            let l = if n == 2 { vec![a, b] } else { vec![a] };
            let busy = busy_set(&l);
            let mut out = 0.0;
            if a < cap {
                out += lambda[0];
            }
            if a > 0 {
                let mu = rates.get(0, busy);
                down[b] = mu;
                out += mu;
            }
            if n == 2 {
                if b < cap {
                    d[(b, b + 1)] = lambda[1];
                    out += lambda[1];
                }
                if b > 0 {
                    let mu = rates.get(1, busy);
                    d[(b, b - 1)] = mu;
                    out += mu;
                }
            }
            d[(b, b)] = -out;
        }
        (d, down)
    };
    // pi_a = pi_{a-1} R_a,  R_a = -lambda_0 (D_a + R_{a+1} L_{a+1})^-1
    let mut rs: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); side];
    let mut next: Option<(DMatrix<f64>, DVector<f64>)> = None;
    for a in (1..side).rev() {
        let (mut d, down) = block(a);
        if let Some((r_up, down_up)) = &next {
            // R_{a+1} L_{a+1}: L is diagonal
            for c in 0..inner {
                for r in 0..inner {
                    d[(r, c)] += r_up[(r, c)] * down_up[c];
                }
            }
        }
        let inv = d.try_inverse().ok_or_else(|| Error::Singular(format!("level {a} block")))?;
        let r = inv * (-lambda[0]);
        next = Some((r.clone(), down));
        rs[a] = r;
    }
    let (mut d0, _) = block(0);
    if let Some((r_up, down_up)) = &next {
        for c in 0..inner {
            for r in 0..inner {
                d0[(r, c)] += r_up[(r, c)] * down_up[c];
            }
        }
    }
    // pi_0 d0 = 0 with one equation replaced by sum = 1
    let mut sys = d0.transpose();
    sys.row_mut(inner - 1).fill(1.0);
    let mut rhs = DVector::<f64>::zeros(inner);
    rhs[inner - 1] = 1.0;
    let p0 = if inner == 1 {
        DVector::from_element(1, 1.0)
    } else {
        sys.lu().solve(&rhs).ok_or_else(|| Error::Singular("boundary level".into()))?
    };
    let mut levels = vec![p0.transpose()];
    for a in 1..side {
        let prev = levels[a - 1].clone();
        levels.push(prev * &rs[a]);
    }
    let total: f64 = levels.iter().map(|v| v.iter().map(|p| p.max(0.0)).sum::<f64>()).sum();
    let mut pi = vec![0.0; side.pow(n as u32)];
    for (a, lv) in levels.iter().enumerate() {
        for b in 0..inner {
            pi[a + side * b] = lv[b].max(0.0) / total;
        }
    }
    Ok(pi)
}

/// Gauss-Seidel sweeps on the balance equations, for three cells.
fn gauss_seidel(rates: &RefinedRates, lambda: &[f64], cap: usize) -> Result<Vec<f64>> {
    let n = rates.n();
    let side = cap + 1;
    let states = side.pow(n as u32);
    let stride: Vec<usize> = (0..n).map(|i| side.pow(i as u32)).collect();
    let mut out_rate = vec![0.0; states];
    let mut dep = vec![0.0; states * n];
    for s in 0..states {
        let l = decode(s, n, side);
        let busy = busy_set(&l);
        for i in 0..n {
            if l[i] < cap {
                out_rate[s] += lambda[i];
            }
            if l[i] > 0 {
                dep[s * n + i] = rates.get(i, busy);
                out_rate[s] += dep[s * n + i];
            }
        }
    }
    let mut pi = vec![1.0 / states as f64; states];
    for sweep in 0..200_000 {
        let mut change = 0.0f64;
        for s in 0..states {
            let l = decode(s, n, side);
            let mut inflow = 0.0;
            for i in 0..n {
                if l[i] > 0 {
                    inflow += pi[s - stride[i]] * lambda[i];
                }
                if l[i] < cap {
                    inflow += pi[s + stride[i]] * dep[(s + stride[i]) * n + i];
                }
            }
            let v = inflow / out_rate[s];
            change = change.max((v - pi[s]).abs());
            pi[s] = v;
        }
        let total: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|v| *v /= total);
        if change < 1e-15 && sweep > 10 {
            return Ok(pi);
        }
    }
    Err(Error::NoConvergence { iterations: 200_000, residual: f64::NAN })
}
