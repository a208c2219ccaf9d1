use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use delay_lqr_core::dual::{evaluate_at, DualOracle};
use delay_lqr_core::evaluate::closed_loop_cost;
use delay_lqr_core::riccati::{solve_finite, solve_infinite, WeightedCosts};
use delay_lqr_core::simulate::{estimate_costs, SimulationOptions};
use delay_lqr_core::{
    ConstrainedProblem, CostTerm, DMatrix, DVector, FixedPointOptions, Horizon, Multipliers, SystemModel,
};

fn model(n: usize, m: usize, d: usize) -> SystemModel {
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { 0.9 } else { 0.05 * (i + 2 * j) as f64 / n as f64 });
    SystemModel {
        a_bar: &a * 0.1,
        a,
        b: DMatrix::from_fn(n, m, |i, j| 0.5 + 0.1 * (i as f64 - j as f64)),
        b_bar: DMatrix::from_element(n, m, 0.05),
        sigma2: 0.5,
        delay: d,
        x0: DVector::from_element(n, 1.0),
        u_init: vec![DVector::zeros(m); d],
    }
}

fn problem(n: usize, m: usize, d: usize, horizon: Horizon) -> ConstrainedProblem {
    let f = horizon.is_finite().then(|| DMatrix::identity(n, n));
    ConstrainedProblem {
        model: model(n, m, d),
        objective: CostTerm::new(DMatrix::identity(n, n), DMatrix::identity(m, m), f.clone()),
        constraints: vec![CostTerm::new(DMatrix::identity(n, n) * 2.0, DMatrix::identity(m, m) * 0.1, f).with_bound(10.0)],
        horizon,
    }
}

fn riccati(c: &mut Criterion) {
    let mut group = c.benchmark_group("riccati");
    for (n, m, d) in [(1, 1, 1), (4, 2, 3), (8, 3, 5)] {
        let p = problem(n, m, d, Horizon::Finite(200));
        let w = WeightedCosts::of_term(&p.objective);
        group.bench_function(format!("finite_n{n}_m{m}_d{d}_N200"), |b| {
            b.iter(|| solve_finite(black_box(&p.model), &w, 200).unwrap())
        });
        let opts = FixedPointOptions::default();
        group.bench_function(format!("infinite_n{n}_m{m}_d{d}"), |b| {
            b.iter(|| solve_infinite(black_box(&p.model), &w, &opts).unwrap())
        });
    }
    group.finish();
}

fn dual(c: &mut Criterion) {
    let mut group = c.benchmark_group("dual_oracle");
    let lam = Multipliers::from_slice(&[0.7]).unwrap();
    for (label, horizon) in [("finite_N50", Horizon::Finite(50)), ("infinite", Horizon::Infinite)] {
        let p = problem(4, 2, 3, horizon);
        let mut oracle = DualOracle::new(&p, FixedPointOptions::default()).unwrap();
        group.bench_function(label, |b| b.iter(|| oracle.evaluate(black_box(&lam)).unwrap()));
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let p = problem(4, 2, 3, Horizon::Infinite);
    let lam = Multipliers::from_slice(&[0.7]).unwrap();
    let gains = evaluate_at(&p, &lam, &FixedPointOptions::default()).unwrap().gains;
    c.bench_function("closed_loop_cost_infinite", |b| {
        b.iter(|| closed_loop_cost(&p.model, black_box(&gains), &p.objective).unwrap())
    });
    let opts = SimulationOptions {
        trials: 1000,
        steps: 200,
        ..SimulationOptions::default()
    };
    let terms = [&p.objective, &p.constraints[0]];
    c.bench_function("monte_carlo_1000x200", |b| {
        b.iter(|| estimate_costs(&p.model, black_box(&gains), &terms, &opts).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = riccati, dual, evaluation
}
criterion_main!(benches);
