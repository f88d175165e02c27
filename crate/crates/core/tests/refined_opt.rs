mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specalloc::baselines::solve_orthogonal;
use specalloc::refined::{refined_delay, refined_rates};
use specalloc::refined_opt::{p2_objective, p2_objective_and_gradient, solve_p2};
use specalloc::{solve_p1, Allocation, Error, ReusePattern, SolverOptions};

#[test]
fn gradient_matches_one_sided_differences() {
    for seed in 0..6u64 {
        let n = 2 + (seed as usize % 3);
        let inst = instance(n, seed, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all: Vec<ReusePattern> = ReusePattern::all(n).skip(1).collect();
        // interior point mixed toward the conservative optimum so it is stable
        let p1 = solve_p1(&inst.table, &inst.lambda, &SolverOptions::default()).unwrap().allocation;
        let r = random_simplex_point(n, &mut rng, &all);
        let y: Vec<f64> = p1.as_slice().iter().zip(r.as_slice()).map(|(a, b)| 0.8 * a + 0.2 * b).collect();
        let x = Allocation::new(n, y).unwrap();
        let (f, g) = p2_objective_and_gradient(&x, &inst.table, &inst.lambda).unwrap();
        assert!((f - refined_delay(&x, &inst.table, &inst.lambda).unwrap().average).abs() <= 1e-12 * f);
        for (b, c) in [(1usize, (1 << n) - 1), ((1 << n) - 1, 2), (3, 1)] {
            let mut d = vec![0.0; 1 << n];
            d[b] += 1.0;
            d[c] -= 1.0;
            let slope: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
            let h = 1e-5 * x.as_slice()[c].min(0.5);
            let z: Vec<f64> = x.as_slice().iter().zip(&d).map(|(a, b)| a + h * b).collect();
            let fd = (p2_objective(&Allocation::new(n, z).unwrap(), &inst.table, &inst.lambda) - f) / h;
            assert!((fd - slope).abs() <= 1e-3 * slope.abs().max(1e-3 * f), "n={n} seed={seed} ({b},{c}): {fd} vs {slope}");
        }
    }
}

#[test]
fn every_restart_descends_and_the_best_beats_reference_points() {
    for seed in 0..6u64 {
        let n = 2 + (seed as usize % 3);
        let inst = instance(n, seed, 0.7);
        let opts = SolverOptions::default();
        let sol = solve_p2(&inst.table, &inst.lambda, &opts).unwrap();
        for r in &sol.restarts {
            assert!(r.objective <= r.start_objective * (1.0 + 1e-12), "{r:?}");
        }
        let p1 = solve_p1(&inst.table, &inst.lambda, &opts).unwrap();
        assert!(sol.objective <= p2_objective(&p1.allocation, &inst.table, &inst.lambda) * (1.0 + 1e-9));
        assert!(sol.objective <= p1.objective);
        if let Ok((orth, _)) = solve_orthogonal(&inst.table, &inst.lambda, &opts) {
            assert!(sol.objective <= p2_objective(&orth, &inst.table, &inst.lambda) * (1.0 + 1e-9));
        }
        let full = p2_objective(&Allocation::full_reuse(n), &inst.table, &inst.lambda);
        assert!(sol.objective <= full * (1.0 + 1e-9));
        let rates = refined_rates(&sol.allocation, &inst.table).unwrap();
        for i in 0..n {
            assert!(rates.worst(i) > inst.lambda[i]);
        }
        assert_eq!(sol.restarts.len(), opts.restarts);
    }
}

#[test]
fn light_traffic_favours_full_reuse() {
    for seed in [0u64, 2, 4] {
        let inst = instance(3, seed, 0.03);
        let sol = solve_p2(&inst.table, &inst.lambda, &SolverOptions::default()).unwrap();
        assert!(sol.allocation.total_variation(&Allocation::full_reuse(3)) < 0.1, "seed {seed}");
    }
}

#[test]
fn outside_the_region_is_infeasible() {
    let inst = instance(3, 1, 1.05);
    assert!(inst.margin < 1.0);
    assert!(matches!(solve_p2(&inst.table, &inst.lambda, &SolverOptions::default()), Err(Error::Infeasible { .. })));
}

#[test]
fn zero_traffic_returns_full_reuse() {
    let inst = instance(3, 2, 0.5);
    let sol = solve_p2(&inst.table, &[0.0; 3], &SolverOptions::default()).unwrap();
    assert_eq!(sol.allocation, Allocation::full_reuse(3));
    assert_eq!(sol.objective, 0.0);
}

#[test]
fn deterministic_in_the_seed() {
    let inst = instance(3, 3, 0.6);
    let opts = SolverOptions::default();
    let a = solve_p2(&inst.table, &inst.lambda, &opts).unwrap();
    let b = solve_p2(&inst.table, &inst.lambda, &opts).unwrap();
    assert_eq!(a, b);
}
