//! The delayed problem is an ordinary LQR on `ξ_k = (x_k, u_{k−1}, …, u_{k−d})`
//! with the current control entering the first input slot and no direct
//! input weight. A textbook backward recursion on that state is the oracle.

mod common;

use common::{mat_rel_close, random_model, random_term, rel_close, Shape};
use delay_lqr_core::evaluate::{closed_loop_cost, dual_value_finite, finite_gains, AugmentedLoop};
use delay_lqr_core::riccati::{solve_finite, WeightedCosts};
use delay_lqr_core::{ConstrainedProblem, CostTerm, DMatrix, DVector, Horizon, Multipliers, SystemModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Oracle {
    /// `P_0 … P_{N+1}` on the augmented state.
    p: Vec<DMatrix<f64>>,
    /// Gains `G_k` with `u_k = −G_k ξ_k`, `k = 0 … N−d`.
    gains: Vec<DMatrix<f64>>,
}

fn augmented_riccati(model: &SystemModel, term: &CostTerm, horizon: usize) -> Oracle {
    let (n, m, d) = (model.a.nrows(), model.b.ncols(), model.delay);
    let dim = n + d * m;
    let last = n + (d - 1) * m;

    let mut phi = DMatrix::zeros(dim, dim);
    let mut psi = DMatrix::zeros(dim, dim);
    phi.view_mut((0, 0), (n, n)).copy_from(&model.a);
    phi.view_mut((0, last), (n, m)).copy_from(&model.b);
    psi.view_mut((0, 0), (n, n)).copy_from(&model.a_bar);
    psi.view_mut((0, last), (n, m)).copy_from(&model.b_bar);
    for j in 1..d {
        for i in 0..m {
            phi[(n + j * m + i, n + (j - 1) * m + i)] = 1.0;
        }
    }
    let mut gamma = DMatrix::zeros(dim, m);
    gamma.view_mut((n, 0), (m, m)).fill_with_identity();

    let stage = |k: usize| {
        let mut c = DMatrix::zeros(dim, dim);
        c.view_mut((0, 0), (n, n)).copy_from(&term.q);
        if k >= d {
            c.view_mut((last, last), (m, m)).copy_from(&term.r);
        }
        c
    };

    let mut p_next = DMatrix::zeros(dim, dim);
    p_next.view_mut((0, 0), (n, n)).copy_from(term.f.as_ref().unwrap());
    let mut ps = vec![p_next.clone()];
    let mut gains = Vec::new();
    for k in (0..=horizon).rev() {
        let mut p = stage(k) + phi.transpose() * &p_next * &phi + psi.transpose() * &p_next * &psi * model.sigma2;
        if k + d <= horizon {
            let h = gamma.transpose() * &p_next * &gamma;
            let g = h.clone().try_inverse().unwrap() * gamma.transpose() * &p_next * &phi;
            p -= phi.transpose() * &p_next * &gamma * &g;
            gains.push(g);
        }
        p = (&p + p.transpose()) * 0.5;
        ps.push(p.clone());
        p_next = p;
    }
    ps.reverse();
    gains.reverse();
    Oracle { p: ps, gains }
}

fn initial_state(model: &SystemModel) -> DVector<f64> {
    AugmentedLoop::new(model).initial_state(model)
}

fn single_term_problem(model: SystemModel, term: CostTerm, horizon: usize) -> ConstrainedProblem {
    ConstrainedProblem {
        model,
        objective: term,
        constraints: vec![],
        horizon: Horizon::Finite(horizon),
    }
}

#[test]
fn noiseless_single_delay_matches_classical_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for case in 0..50 {
        let n = rng.random_range(1..=3);
        let m = rng.random_range(1..=3);
        let model = random_model(&mut rng, Shape { n, m, d: 1 }, false);
        let term = random_term(&mut rng, n, m, true);
        let horizon = rng.random_range(1..=10);

        let oracle = augmented_riccati(&model, &term, horizon);
        let traj = solve_finite(&model, &WeightedCosts::of_term(&term), horizon).unwrap();

        // Minimising the pending control out of P_k leaves Z_k.
        for k in 1..=horizon {
            let p = &oracle.p[k];
            let pxx = p.view((0, 0), (n, n));
            let pxu = p.view((0, n), (n, m));
            let puu = p.view((n, n), (m, m)).into_owned();
            let schur = pxx - pxu * puu.try_inverse().unwrap() * pxu.transpose();
            assert!(mat_rel_close(traj.z(k), &schur, 1e-10), "case {case}: Z_{k}");
        }
        // u_k = −K_k(A x_k + B u_{k−1}) = −K_k [A B] ξ_k.
        let gains = finite_gains(&traj);
        for (k, g) in oracle.gains.iter().enumerate() {
            let mut ab = DMatrix::zeros(n, n + m);
            ab.view_mut((0, 0), (n, n)).copy_from(&model.a);
            ab.view_mut((0, n), (n, m)).copy_from(&model.b);
            assert!(mat_rel_close(&(gains.at(k).unwrap() * ab), g, 1e-10), "case {case}: gain {k}");
        }
        let xi = initial_state(&model);
        let cost = xi.dot(&(&oracle.p[0] * &xi));
        let problem = single_term_problem(model.clone(), term.clone(), horizon);
        let value = dual_value_finite(
            &traj,
            &problem.model,
            &WeightedCosts::of_term(&term),
            &Multipliers::zeros(0),
            &DVector::zeros(0),
        )
        .unwrap();
        assert!(rel_close(value, cost, 1e-10), "case {case}: {value} vs {cost}");
    }
}

#[test]
fn noisy_delayed_value_matches_augmented_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xde1a);
    for case in 0..40 {
        let shape = Shape::random(&mut rng);
        let model = random_model(&mut rng, shape, true);
        let term = random_term(&mut rng, shape.n, shape.m, true);
        let horizon = rng.random_range(shape.d..=10);

        let oracle = augmented_riccati(&model, &term, horizon);
        let xi = initial_state(&model);
        let cost = xi.dot(&(&oracle.p[0] * &xi));

        let w = WeightedCosts::of_term(&term);
        let traj = solve_finite(&model, &w, horizon).unwrap();
        let value = dual_value_finite(&traj, &model, &w, &Multipliers::zeros(0), &DVector::zeros(0)).unwrap();
        assert!(rel_close(value, cost, 1e-9), "case {case} {shape:?}: value {value} vs {cost}");

        let gains = finite_gains(&traj);
        let closed = closed_loop_cost(&model, &gains, &term).unwrap();
        assert!(rel_close(closed, cost, 1e-9), "case {case} {shape:?}: closed loop {closed} vs {cost}");

        let lp = AugmentedLoop::new(&model);
        for (k, g) in oracle.gains.iter().enumerate() {
            let ours = gains.at(k).unwrap();
            let mut predictor = DMatrix::zeros(shape.n, lp.dim());
            let mut a_pow = DMatrix::identity(shape.n, shape.n);
            for i in 1..=shape.d {
                predictor
                    .view_mut((0, shape.n + (i - 1) * shape.m), (shape.n, shape.m))
                    .copy_from(&(&a_pow * &model.b));
                a_pow = &model.a * a_pow;
            }
            predictor.view_mut((0, 0), (shape.n, shape.n)).copy_from(&a_pow);
            assert!(mat_rel_close(&(ours * predictor), g, 1e-9), "case {case}: gain {k}");
        }
    }
}
