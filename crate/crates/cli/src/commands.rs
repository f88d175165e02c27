use std::path::Path;

use rayon::prelude::*;
use specalloc::baselines::{solve_orthogonal, throughput_margin};
use specalloc::bounds::bounds_report;
use specalloc::conservative::conservative_delay;
use specalloc::network::build_table;
use specalloc::power::{alternate, PowerOptions, Scheme};
use specalloc::refined::{refined_delay, MAX_LUMPED_BTS};
use specalloc::refined_opt::solve_p2;
use specalloc::sim::{simulate, SimOptions, SimResult};
use specalloc::{build_scenario, solve_p1, Allocation, EfficiencyTable, Scenario, ScenarioConfig, SolverOptions};

use crate::args::{AllocateArgs, PowerArgs, SchemeArg, SweepArgs};
use crate::records::*;
use crate::{classify, CliError, WORKERS_ENV};

fn load_scenario(path: &Path) -> Result<Scenario, CliError> {
    let cfg = ScenarioConfig::from_path(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok(build_scenario(&cfg)?)
}

fn solver_options(tol: f64) -> Result<SolverOptions, CliError> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(CliError::usage(format!("--tol must be in (0, 1), got {tol}")));
    }
    Ok(SolverOptions { tol, ..SolverOptions::default() })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn solve(
    scheme: SchemeArg,
    tbl: &EfficiencyTable,
    lambda: &[f64],
    opts: &SolverOptions,
) -> specalloc::Result<(Allocation, SolverInfo)> {
    Ok(match scheme {
        SchemeArg::Conservative => {
            let s = solve_p1(tbl, lambda, opts)?;
            let info = SolverInfo {
                objective: s.objective,
                kkt_residual: Some(s.kkt_residual),
                iterations: Some(s.iterations),
                ..Default::default()
            };
            (s.allocation, info)
        }
        SchemeArg::Refined => {
            let s = solve_p2(tbl, lambda, opts)?;
            let iterations = s.restarts.iter().map(|r| r.iterations).sum();
            let info = SolverInfo {
                objective: s.objective,
                kkt_residual: None,
                iterations: Some(iterations),
                agreement: Some(s.agreement),
                stalled: Some(s.stalled),
                warnings: s.warnings,
            };
            (s.allocation, info)
        }
        SchemeArg::Orthogonal => {
            let (x, rep) = solve_orthogonal(tbl, lambda, opts)?;
            (x, SolverInfo { objective: rep.average, ..Default::default() })
        }
        SchemeArg::FullReuse => {
            let x = Allocation::full_reuse(tbl.n());
            let rep = conservative_delay(&x, tbl, lambda)?;
            (x, SolverInfo { objective: rep.average, ..Default::default() })
        }
    })
}

pub fn evaluate(x: &Allocation, tbl: &EfficiencyTable, lambda: &[f64]) -> specalloc::Result<Evaluation> {
    let conservative = conservative_delay(x, tbl, lambda)?;
    let (refined, bounds) = if tbl.n() <= MAX_LUMPED_BTS {
        (Some(refined_delay(x, tbl, lambda)?), Some(bounds_report(x, tbl, lambda)?))
    } else {
        (None, None)
    };
    Ok(Evaluation { conservative, refined, bounds })
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn allocate(a: &AllocateArgs) -> Result<(), CliError> {
    let sc = load_scenario(&a.config)?;
    let opts = solver_options(a.tol)?;
    let tbl = build_table(&sc)?;
    let lambda = sc.arrival_rates.clone();
    let margin = throughput_margin(&tbl, &lambda);
    let explain = |e: specalloc::Error| {
        let restate = !matches!(e, specalloc::Error::Infeasible { .. });
        let mut err = CliError::from(e);
        if err.code == crate::EXIT_INFEASIBLE && restate {
            err.message = format!("{}; throughput margin {margin}", err.message);
        }
        err
    };
    let (x, solver, scheme) = match &a.allocation {
        Some(path) => {
            let rec = read_allocation(path)?;
            rec.allocation.check_table(&tbl)?;
            (rec.allocation, None, rec.scheme)
        }
        None => {
            let (x, info) = solve(a.scheme, &tbl, &lambda, &opts).map_err(explain)?;
            (x, Some(info), a.scheme.name().to_string())
        }
    };
    let evaluation = evaluate(&x, &tbl, &lambda).map_err(explain)?;
    create_dir(&a.out)?;
    let report = ReportFile {
        schema: REPORT_SCHEMA.into(),
        scheme: scheme.clone(),
        lambda,
        throughput_margin: finite(margin),
        support: x.support().iter().map(|p| p.to_string()).collect(),
        evaluation,
        solver,
    };
    write_json(&a.out.join("report.json"), &report)?;
    let file = AllocationFile { schema: ALLOCATION_SCHEMA.into(), scheme, allocation: x };
    write_json(&a.out.join("allocation.json"), &file)
}

fn worker_count() -> Result<usize, CliError> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(k) if k > 0 => Ok(k),
            _ => Err(CliError::usage(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|k| k.get()).unwrap_or(1)),
    }
}

/// Simulation results averaged over seeds. Standard errors are pooled as
/// `sqrt(sum se_k^2) / K`.
#[derive(Debug, Default)]
pub struct SimAggregate {
    pub average: Option<f64>,
    pub stderr: Option<f64>,
    pub cell_mean: Vec<Option<f64>>,
    pub cell_stderr: Vec<Option<f64>>,
    pub utilization: Vec<f64>,
    pub pooled_cdf: Vec<f64>,
}

fn mean_and_pooled(vals: impl Iterator<Item = (Option<f64>, Option<f64>)>) -> (Option<f64>, Option<f64>) {
    let (mut m, mut v, mut k, mut all_se) = (0.0, 0.0, 0usize, true);
    for (a, s) in vals {
        let Some(a) = a else { return (None, None) };
        m += a;
        match s {
            Some(s) => v += s * s,
            None => all_se = false,
        }
        k += 1;
    }
    if k == 0 {
        return (None, None);
    }
    (Some(m / k as f64), all_se.then(|| v.sqrt() / k as f64))
}

pub fn aggregate(runs: &[SimResult]) -> SimAggregate {
    let n = runs.first().map_or(0, |r| r.sojourn.len());
    let k = runs.len() as f64;
    let (average, stderr) = mean_and_pooled(runs.iter().map(|r| (r.average, r.average_stderr)));
    let mut cell_mean = vec![None; n];
    let mut cell_stderr = vec![None; n];
    for i in 0..n {
        (cell_mean[i], cell_stderr[i]) = mean_and_pooled(runs.iter().map(|r| (r.sojourn[i], r.stderr[i])));
    }
    let utilization = (0..n).map(|i| runs.iter().map(|r| r.utilization[i]).sum::<f64>() / k).collect();
    let len = runs.iter().map(|r| r.pooled_cdf.len()).max().unwrap_or(0);
    let pooled_cdf = (0..len)
        .map(|l| runs.iter().map(|r| r.pooled_cdf.get(l).copied().unwrap_or(1.0)).sum::<f64>() / k)
        .collect();
    SimAggregate { average, stderr, cell_mean, cell_stderr, utilization, pooled_cdf }
}

fn simulate_seeds(
    x: &Allocation,
    tbl: &EfficiencyTable,
    lambda: &[f64],
    horizon: u64,
    seeds: &[u64],
) -> specalloc::Result<Option<SimAggregate>> {
    if horizon == 0 || seeds.is_empty() {
        return Ok(None);
    }
    let runs = seeds
        .iter()
        .map(|&s| simulate(x, tbl, lambda, &SimOptions::new(horizon, s)))
        .collect::<specalloc::Result<Vec<_>>>()?;
    Ok(Some(aggregate(&runs)))
}

/// One (load, scheme) point of a sweep.
#[derive(Debug)]
pub struct SweepPoint {
    pub load: f64,
    pub scheme: SchemeArg,
    /// `ok`, `infeasible`, `solver-failure` or `error`.
    pub status: &'static str,
    pub message: String,
    pub allocation: Option<Allocation>,
    pub evaluation: Option<Evaluation>,
    pub sim: Option<SimAggregate>,
}

fn status_of(e: &specalloc::Error) -> &'static str {
    match classify(e) {
        crate::EXIT_INFEASIBLE => "infeasible",
        crate::EXIT_SOLVER => "solver-failure",
        _ => "error",
    }
}

fn sweep_point(
    load: f64,
    scheme: SchemeArg,
    tbl: &EfficiencyTable,
    lambda: &[f64],
    a: &SweepArgs,
    opts: &SolverOptions,
) -> SweepPoint {
    let mut pt = SweepPoint { load, scheme, status: "ok", message: String::new(), allocation: None, evaluation: None, sim: None };
    let res = solve(scheme, tbl, lambda, opts).and_then(|(x, _)| {
        let ev = evaluate(&x, tbl, lambda)?;
        let sim = simulate_seeds(&x, tbl, lambda, a.horizon, &a.seeds)?;
        Ok((x, ev, sim))
    });
    match res {
        Ok((x, ev, sim)) => {
            pt.allocation = Some(x);
            pt.evaluation = Some(ev);
            pt.sim = sim;
        }
        Err(e) => {
            pt.status = status_of(&e);
            pt.message = e.to_string();
        }
    }
    pt
}

fn sweep_lambda(direction: &[f64], load: f64) -> Vec<f64> {
    let mean = direction.iter().sum::<f64>() / direction.len() as f64;
    direction.iter().map(|d| d * load / mean).collect()
}

pub fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    if a.loads.is_empty() || a.scheme.is_empty() {
        return Err(CliError::usage("empty load grid or scheme list"));
    }
    if let Some(l) = a.loads.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(CliError::usage(format!("load {l} must be finite and >= 0")));
    }
    let sc = load_scenario(&a.config)?;
    let opts = solver_options(a.tol)?;
    let tbl = build_table(&sc)?;
    let direction = sc.arrival_rates.clone();
    if direction.iter().sum::<f64>() <= 0.0 {
        return Err(CliError::usage("config traffic is zero; the sweep needs a traffic mix"));
    }
    // mean load at the throughput-region boundary
    let boundary = throughput_margin(&tbl, &sweep_lambda(&direction, 1.0));
    let grid: Vec<(f64, SchemeArg)> = a.loads.iter().flat_map(|&l| a.scheme.iter().map(move |&s| (l, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count()?)
        .build()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let points: Vec<SweepPoint> = pool.install(|| {
        grid.par_iter()
            .map(|&(load, scheme)| sweep_point(load, scheme, &tbl, &sweep_lambda(&direction, load), a, &opts))
            .collect()
    });

    create_dir(&a.out)?;
    let cdf_dir = a.out.join("cdf");
    create_dir(&cdf_dir)?;
    let sweep_path = a.out.join("sweep.csv");
    let mut w = csv_writer(
        &sweep_path,
        SWEEP_SCHEMA,
        &[
            "load",
            "region_load",
            "scheme",
            "status",
            "conservative_delay",
            "refined_delay",
            "sim_delay",
            "sim_stderr",
            "seeds",
            "support",
            "utilization",
            "message",
        ],
    )?;
    let cells_path = a.out.join("cells.csv");
    let mut wc = csv_writer(&cells_path, CELLS_SCHEMA, &["load", "scheme", "cell", "lambda", "sim_delay", "sim_stderr", "utilization"])?;
    for (k, p) in points.iter().enumerate() {
        let ev = p.evaluation.as_ref();
        let sim = p.sim.as_ref();
        let util = sim.map(|s| s.utilization.iter().map(|u| u.to_string()).collect::<Vec<_>>().join(";"));
        w.write_record([
            p.load.to_string(),
            num(finite(p.load / boundary)),
            p.scheme.name().to_string(),
            p.status.to_string(),
            num(ev.map(|e| e.conservative.average)),
            num(ev.and_then(|e| e.refined.as_ref()).map(|r| r.average)),
            num(sim.and_then(|s| s.average)),
            num(sim.and_then(|s| s.stderr)),
            if sim.is_some() { a.seeds.len().to_string() } else { String::new() },
            p.allocation.as_ref().map(|x| x.support().len().to_string()).unwrap_or_default(),
            util.unwrap_or_default(),
            p.message.clone(),
        ])
        .map_err(|e| CliError::csv(&sweep_path, e))?;
        let lambda = sweep_lambda(&direction, p.load);
        if let Some(s) = sim {
            for (i, l) in lambda.iter().enumerate() {
                wc.write_record([
                    p.load.to_string(),
                    p.scheme.name().to_string(),
                    (i + 1).to_string(),
                    l.to_string(),
                    num(s.cell_mean[i]),
                    num(s.cell_stderr[i]),
                    s.utilization[i].to_string(),
                ])
                .map_err(|e| CliError::csv(&cells_path, e))?;
            }
            let cdf_path = cdf_dir.join(format!("point{k:03}_{}.csv", p.scheme.name()));
            let mut wq = csv_writer(&cdf_path, CDF_SCHEMA, &["load", "scheme", "queue_length", "cdf"])?;
            for (l, c) in s.pooled_cdf.iter().enumerate() {
                wq.write_record([p.load.to_string(), p.scheme.name().to_string(), l.to_string(), c.to_string()])
                    .map_err(|e| CliError::csv(&cdf_path, e))?;
            }
            wq.flush().map_err(|e| CliError::io(&cdf_path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&sweep_path, e))?;
    wc.flush().map_err(|e| CliError::io(&cells_path, e))
}

pub fn powerctl(a: &PowerArgs) -> Result<(), CliError> {
    let scheme = match a.scheme {
        SchemeArg::Conservative => Scheme::Conservative,
        SchemeArg::Refined => Scheme::Refined,
        other => return Err(CliError::usage(format!("powerctl supports conservative or refined, not {}", other.name()))),
    };
    if a.iters == 0 {
        return Err(CliError::usage("--iters must be at least 1"));
    }
    let sc = load_scenario(&a.config)?;
    let lambda = sc.arrival_rates.clone();
    let opts = PowerOptions { max_iters: a.iters, solver: solver_options(a.tol)?, sim: None, budgets: None };
    let traj = alternate(&sc, &lambda, scheme, &opts)?;
    if traj.steps.is_empty() {
        let msg = traj.failure.unwrap_or_else(|| "no iterate could be solved".into());
        return Err(CliError { code: crate::EXIT_INFEASIBLE, message: msg });
    }
    create_dir(&a.out)?;
    let path = a.out.join("trajectory.csv");
    let mut w = csv_writer(
        &path,
        TRAJECTORY_SCHEMA,
        &["iteration", "scheme", "analytic_delay", "sim_delay", "sim_stderr", "change", "converged", "cycle"],
    )?;
    let last = traj.steps.len() - 1;
    for (k, step) in traj.steps.iter().enumerate() {
        let tbl = build_table(&sc.with_psd(&step.psd))?;
        let sim = simulate_seeds(&step.allocation, &tbl, &lambda, a.horizon, &a.seeds)?;
        let is_last = k == last;
        w.write_record([
            step.iteration.to_string(),
            scheme.name().to_string(),
            step.report.average.to_string(),
            num(sim.as_ref().and_then(|s| s.average)),
            num(sim.as_ref().and_then(|s| s.stderr)),
            num(step.change),
            (is_last && traj.converged).to_string(),
            if is_last { traj.cycle.map(|c| c.to_string()).unwrap_or_default() } else { String::new() },
        ])
        .map_err(|e| CliError::csv(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    write_json(&a.out.join("trajectory.json"), &traj)?;
    if let Some(f) = &traj.failure {
        eprintln!("warning: trajectory stopped early: {f}");
    }
    Ok(())
}
