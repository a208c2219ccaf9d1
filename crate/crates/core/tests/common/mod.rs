#![allow(dead_code)]

use delay_lqr_core::{ConstrainedProblem, CostTerm, DMatrix, DVector, Horizon, SystemModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// `GGᵀ + εI`, comfortably positive definite.
pub fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = uniform(rng, n, n, 1.0);
    &g * g.transpose() + DMatrix::identity(n, n) * 0.2
}

#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub n: usize,
    pub m: usize,
    pub d: usize,
}

impl Shape {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            n: rng.random_range(1..=3),
            m: rng.random_range(1..=3),
            d: rng.random_range(1..=3),
        }
    }
}

pub fn random_model(rng: &mut ChaCha8Rng, shape: Shape, noisy: bool) -> SystemModel {
    let Shape { n, m, d } = shape;
    let (a_bar, b_bar, sigma2) = if noisy {
        (uniform(rng, n, n, 0.3), uniform(rng, n, m, 0.3), rng.random_range(0.1..1.0))
    } else {
        (DMatrix::zeros(n, n), DMatrix::zeros(n, m), 0.0)
    };
    SystemModel {
        a: uniform(rng, n, n, 0.8),
        a_bar,
        b: uniform(rng, n, m, 1.0),
        b_bar,
        sigma2,
        delay: d,
        x0: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
        u_init: (0..d).map(|_| DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0))).collect(),
    }
}

pub fn random_term(rng: &mut ChaCha8Rng, n: usize, m: usize, finite: bool) -> CostTerm {
    let q = spd(rng, n);
    let r = spd(rng, m);
    let f = finite.then(|| spd(rng, n));
    CostTerm::new(q, r, f)
}

/// A random problem with `constraints` bounded terms; bounds are arbitrary positives.
pub fn random_problem(seed: u64, finite: bool, constraints: usize, noisy: bool) -> ConstrainedProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::random(&mut rng);
    let model = random_model(&mut rng, shape, noisy);
    let horizon = if finite {
        Horizon::Finite(rng.random_range(shape.d..=10))
    } else {
        Horizon::Infinite
    };
    let objective = random_term(&mut rng, shape.n, shape.m, finite);
    let constraints = (0..constraints)
        .map(|_| random_term(&mut rng, shape.n, shape.m, finite).with_bound(rng.random_range(1.0..20.0)))
        .collect();
    ConstrainedProblem {
        model,
        objective,
        constraints,
        horizon,
    }
    .checked()
    .expect("generated problem is valid")
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn mat_rel_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    let scale = b.amax().max(a.amax()).max(1.0);
    (a - b).amax() <= tol * scale
}
