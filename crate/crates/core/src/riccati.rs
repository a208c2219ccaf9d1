//! λ-weighted costs and the coupled Z/X/L Riccati recursion.
//!
//! For a fixed multiplier vector the backward recursion is
//!
//! ```text
//! Υ_k = BᵀZ_{k+1}B + σ²B̄ᵀX_{k+1}B̄ + R(λ)
//! M_k = BᵀZ_{k+1}A + σ²B̄ᵀX_{k+1}Ā
//! L_k = M_kᵀ Υ_k⁻¹ M_k
//! Z_k = AᵀZ_{k+1}A + σ²ĀᵀX_{k+1}Ā + Q(λ) − L_k
//! X_k = Z_k + Σ_{i<d} (Aᵀ)ⁱ L_{k+i} Aⁱ
//! ```
//!
//! run from `Z_{N+1} = X_{N+1} = F(λ)` down to `k = d`, with `L_j = 0` for
//! `j > N`. The steady-state solution is the limit of the same backward map.

use std::collections::VecDeque;

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, max_abs_diff, pd_factor, powers, symmetrize};
use crate::model::{ConstrainedProblem, CostTerm, Multipliers, SystemModel};

/// `Q(λ) = Q₀ + Σ λᵢQᵢ`, and likewise for `R` and the terminal `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCosts {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub f: Option<DMatrix<f64>>,
}

impl WeightedCosts {
    /// Weights of a single term, as if it were the only cost.
    pub fn of_term(term: &CostTerm) -> Self {
        Self {
            q: term.q.clone(),
            r: term.r.clone(),
            f: term.f.clone(),
        }
    }

    /// `base + Σ wᵢ termᵢ`. `base` may be `None` for a pure combination.
    pub fn combine(base: Option<&CostTerm>, terms: &[CostTerm], weights: &[f64]) -> Self {
        assert_eq!(terms.len(), weights.len());
        let (n, m) = match (base, terms.first()) {
            (Some(t), _) | (None, Some(t)) => (t.q.nrows(), t.r.nrows()),
            (None, None) => panic!("empty cost combination"),
        };
        let has_f = base.map_or_else(|| terms[0].f.is_some(), |t| t.f.is_some());
        let mut q = DMatrix::zeros(n, n);
        let mut r = DMatrix::zeros(m, m);
        let mut f = has_f.then(|| DMatrix::zeros(n, n));
        let mut add = |t: &CostTerm, w: f64| {
            q += &t.q * w;
            r += &t.r * w;
            if let (Some(acc), Some(tf)) = (f.as_mut(), t.f.as_ref()) {
                *acc += tf * w;
            }
        };
        if let Some(b) = base {
            add(b, 1.0);
        }
        for (t, &w) in terms.iter().zip(weights) {
            add(t, w);
        }
        Self { q, r, f }
    }
}

/// Objective plus the λ-weighted constraint terms.
pub fn weighted_costs(problem: &ConstrainedProblem, lam: &Multipliers) -> Result<WeightedCosts> {
    if lam.len() != problem.num_constraints() {
        return Err(Error::Dimension(format!(
            "{} multipliers for {} constraints",
            lam.len(),
            problem.num_constraints()
        )));
    }
    Ok(WeightedCosts::combine(
        Some(&problem.objective),
        &problem.constraints,
        lam.as_vector().as_slice(),
    ))
}

/// Iteration controls for the steady-state (fixed-point) solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    /// Stop once the largest entry change falls below `tol · max(1, max|entry|)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Any iterate entry larger than this is treated as divergence.
    pub divergence_cap: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 100_000,
            divergence_cap: 1e12,
        }
    }
}

/// Per-stage gain quantities: `Υ`, `M`, its factorization, `Υ⁻¹M` and `L`.
#[derive(Debug, Clone)]
pub struct StageGain {
    pub upsilon: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub factor: Cholesky<f64, Dyn>,
    /// `Υ⁻¹M`, the feedback gain acting on the predicted state.
    pub feedback: DMatrix<f64>,
    pub l: DMatrix<f64>,
}

/// Plant matrices prepared once per solve.
pub(crate) struct Plant<'a> {
    pub model: &'a SystemModel,
    pub a_t: DMatrix<f64>,
    pub a_bar_t: DMatrix<f64>,
    pub b_t: DMatrix<f64>,
    pub b_bar_t: DMatrix<f64>,
    /// `A⁰ … A^{d-1}`.
    pub a_pows: Vec<DMatrix<f64>>,
}

impl<'a> Plant<'a> {
    pub fn new(model: &'a SystemModel) -> Self {
        Self {
            model,
            a_t: model.a.transpose(),
            a_bar_t: model.a_bar.transpose(),
            b_t: model.b.transpose(),
            b_bar_t: model.b_bar.transpose(),
            a_pows: powers(&model.a, model.delay.saturating_sub(1)),
        }
    }

    /// `(BᵀPB + σ²B̄ᵀSB̄, BᵀPA + σ²B̄ᵀSĀ)` for next-stage `(P, S)`.
    pub fn input_blocks(&self, p: &DMatrix<f64>, s: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let s2 = self.model.sigma2;
        let bp = &self.b_t * p;
        let bs = &self.b_bar_t * s * s2;
        let uu = &bp * &self.model.b + &bs * &self.model.b_bar;
        let ux = &bp * &self.model.a + &bs * &self.model.a_bar;
        (uu, ux)
    }

    /// `AᵀPA + σ²ĀᵀSĀ`.
    pub fn state_block(&self, p: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a_t * p * &self.model.a + &self.a_bar_t * s * &self.model.a_bar * self.model.sigma2
    }

    /// `Σ_{i<d} (Aᵀ)ⁱ L_i Aⁱ` over `current` followed by the newer-stage history.
    pub fn delayed_sum(&self, current: &DMatrix<f64>, history: &VecDeque<DMatrix<f64>>) -> DMatrix<f64> {
        let mut acc = current.clone();
        for (p, l) in self.a_pows.iter().skip(1).zip(history.iter()) {
            acc += p.transpose() * l * p;
        }
        acc
    }

    /// One backward step: gain quantities from `(Z_{k+1}, X_{k+1})`, then `Z_k`.
    pub fn step(
        &self,
        z_next: &DMatrix<f64>,
        x_next: &DMatrix<f64>,
        w: &WeightedCosts,
        stage: usize,
    ) -> Result<(StageGain, DMatrix<f64>)> {
        let (uu, ux) = self.input_blocks(z_next, x_next);
        let upsilon = symmetrize(&(uu + &w.r));
        let factor = pd_factor(&upsilon).ok_or(Error::NotPositiveDefinite { stage })?;
        let feedback = factor.solve(&ux);
        let l = symmetrize(&(ux.transpose() * &feedback));
        let z = symmetrize(&(self.state_block(z_next, x_next) + &w.q - &l));
        Ok((
            StageGain {
                upsilon,
                m: ux,
                factor,
                feedback,
                l,
            },
            z,
        ))
    }
}

/// Backward solution for `k = d … N+1`.
#[derive(Debug, Clone)]
pub struct RiccatiTrajectory {
    delay: usize,
    horizon: usize,
    /// `Z_k`, `X_k` for `k = d ..= N+1`, indexed by `k - d`.
    z: Vec<DMatrix<f64>>,
    x: Vec<DMatrix<f64>>,
    /// Stage gains for `k = d ..= N`, indexed by `k - d`.
    stages: Vec<StageGain>,
    zero: DMatrix<f64>,
}

impl RiccatiTrajectory {
    pub fn delay(&self) -> usize {
        self.delay
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn idx(&self, k: usize) -> usize {
        assert!(
            (self.delay..=self.horizon + 1).contains(&k),
            "stage {k} outside d..=N+1 = {}..={}",
            self.delay,
            self.horizon + 1
        );
        k - self.delay
    }

    pub fn z(&self, k: usize) -> &DMatrix<f64> {
        &self.z[self.idx(k)]
    }

    pub fn x(&self, k: usize) -> &DMatrix<f64> {
        &self.x[self.idx(k)]
    }

    /// `L_k`, zero beyond the last controlled stage `N`.
    pub fn l(&self, k: usize) -> &DMatrix<f64> {
        if k > self.horizon {
            &self.zero
        } else {
            &self.stage(k).l
        }
    }

    /// Gain quantities at stage `k ∈ d..=N`.
    pub fn stage(&self, k: usize) -> &StageGain {
        assert!(k <= self.horizon, "no gain stage beyond N");
        &self.stages[self.idx(k)]
    }

    pub fn upsilon(&self, k: usize) -> &DMatrix<f64> {
        &self.stage(k).upsilon
    }

    pub fn m(&self, k: usize) -> &DMatrix<f64> {
        &self.stage(k).m
    }
}

/// Backward Riccati-ZXL recursion from `F(λ)` down to `k = d`.
pub fn solve_finite(model: &SystemModel, w: &WeightedCosts, horizon: usize) -> Result<RiccatiTrajectory> {
    let d = model.delay;
    if horizon < d {
        return Err(Error::Dimension(format!("horizon N = {horizon} < d = {d}")));
    }
    let f = w
        .f
        .as_ref()
        .ok_or_else(|| Error::Dimension("finite horizon needs a terminal weight".into()))?;
    let plant = Plant::new(model);
    let n = model.state_dim();
    let len = horizon + 2 - d;

    let mut z = vec![symmetrize(f)];
    let mut x = vec![symmetrize(f)];
    let mut stages: Vec<StageGain> = Vec::with_capacity(len - 1);
    // L of the d-1 stages after the current one, nearest first.
    let mut history: VecDeque<DMatrix<f64>> = VecDeque::with_capacity(d);

    for k in (d..=horizon).rev() {
        let (z_next, x_next) = (z.last().unwrap(), x.last().unwrap());
        let (stage, z_k) = plant.step(z_next, x_next, w, k)?;
        let x_k = symmetrize(&(&z_k + plant.delayed_sum(&stage.l, &history)));
        history.push_front(stage.l.clone());
        history.truncate(d.saturating_sub(1));
        z.push(z_k);
        x.push(x_k);
        stages.push(stage);
    }
    z.reverse();
    x.reverse();
    stages.reverse();
    Ok(RiccatiTrajectory {
        delay: d,
        horizon,
        z,
        x,
        stages,
        zero: DMatrix::zeros(n, n),
    })
}

/// Fixed point of the Riccati-ZXL map.
#[derive(Debug, Clone)]
pub struct SteadySolution {
    pub z: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub gain: StageGain,
    pub iterations: usize,
    /// Largest residual of the algebraic equations at the returned point.
    pub residual: f64,
}

impl SteadySolution {
    pub fn l(&self) -> &DMatrix<f64> {
        &self.gain.l
    }

    pub fn upsilon(&self) -> &DMatrix<f64> {
        &self.gain.upsilon
    }

    pub fn m(&self) -> &DMatrix<f64> {
        &self.gain.m
    }
}

/// Steady-state solution by iterating the finite-horizon map from `Z = X = Q(λ)`.
///
/// Divergence past the cap or running out of iterations is reported as
/// [`Error::NotStabilizable`]; this is a numerical verdict, not a proof.
pub fn solve_infinite(model: &SystemModel, w: &WeightedCosts, opts: &FixedPointOptions) -> Result<SteadySolution> {
    solve_infinite_from(model, w, opts, None)
}

/// As [`solve_infinite`], optionally starting from a previous solution
/// (e.g. at a nearby λ). The fixed point is unique, so the start only
/// changes the iteration count.
pub fn solve_infinite_from(
    model: &SystemModel,
    w: &WeightedCosts,
    opts: &FixedPointOptions,
    start: Option<&SteadySolution>,
) -> Result<SteadySolution> {
    let d = model.delay;
    let plant = Plant::new(model);
    let (mut z, mut x, mut history) = match start {
        Some(s) => (
            s.z.clone(),
            s.x.clone(),
            std::iter::repeat_n(s.gain.l.clone(), d - 1).collect::<VecDeque<_>>(),
        ),
        None => (symmetrize(&w.q), symmetrize(&w.q), VecDeque::new()),
    };

    for iter in 1..=opts.max_iter {
        let (stage, z_new) = plant.step(&z, &x, w, iter)?;
        let x_new = symmetrize(&(&z_new + plant.delayed_sum(&stage.l, &history)));
        history.push_front(stage.l);
        history.truncate(d - 1);

        let scale = max_abs(&z_new).max(max_abs(&x_new));
        if !scale.is_finite() || scale > opts.divergence_cap {
            return Err(Error::NotStabilizable {
                reason: format!("Riccati iterate exceeded {:e} after {iter} iterations", opts.divergence_cap),
            });
        }
        let change = max_abs_diff(&z_new, &z).max(max_abs_diff(&x_new, &x));
        z = z_new;
        x = x_new;
        if change < opts.tol * scale.max(1.0) {
            return finish_steady(&plant, z, x, w, iter);
        }
    }
    Err(Error::NotStabilizable {
        reason: format!("Riccati iteration did not settle in {} iterations", opts.max_iter),
    })
}

fn finish_steady(
    plant: &Plant<'_>,
    z: DMatrix<f64>,
    x: DMatrix<f64>,
    w: &WeightedCosts,
    iterations: usize,
) -> Result<SteadySolution> {
    if pd_factor(&z).is_none() {
        return Err(Error::NotStabilizable {
            reason: "steady-state Z is not positive definite".into(),
        });
    }
    let (gain, z_res) = plant.step(&z, &x, w, 0)?;
    let history: VecDeque<DMatrix<f64>> =
        std::iter::repeat_n(gain.l.clone(), plant.model.delay - 1).collect();
    let x_res = &z + plant.delayed_sum(&gain.l, &history);
    let residual = max_abs_diff(&z_res, &z).max(max_abs_diff(&x_res, &x));
    Ok(SteadySolution {
        z,
        x,
        gain,
        iterations,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;

    use super::*;
    use crate::model::{CostTerm, Horizon};

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_model(a: f64, a_bar: f64, b: f64, b_bar: f64) -> SystemModel {
        SystemModel {
            a: s(a),
            a_bar: s(a_bar),
            b: s(b),
            b_bar: s(b_bar),
            sigma2: 1.0,
            delay: 1,
            x0: DVector::from_element(1, 1.0),
            u_init: vec![DVector::from_element(1, -1.0)],
        }
    }

    fn example_a() -> ConstrainedProblem {
        ConstrainedProblem {
            model: scalar_model(1.0, 1.0, 2.0, 2.0),
            objective: CostTerm::scalar(2.0, 5.0, Some(5.0)),
            constraints: vec![CostTerm::scalar(2.0, 3.0, Some(1.0)).with_bound(13.25)],
            horizon: Horizon::Finite(2),
        }
    }

    fn example_b() -> ConstrainedProblem {
        ConstrainedProblem {
            model: scalar_model(1.3, 0.1, 0.2, 0.1),
            objective: CostTerm::scalar(1.0, 1.0, None),
            constraints: vec![CostTerm::scalar(0.5, 2.0, None).with_bound(49.35)],
            horizon: Horizon::Infinite,
        }
    }

    #[test]
    fn weighted_costs_scalar_example() {
        let p = example_a();
        let w = weighted_costs(&p, &Multipliers::from_slice(&[2.2313]).unwrap()).unwrap();
        assert_abs_diff_eq!(w.q[(0, 0)], 6.4626, epsilon = 1e-12);
        assert_abs_diff_eq!(w.r[(0, 0)], 11.6939, epsilon = 1e-12);

        let w0 = weighted_costs(&p, &Multipliers::zeros(1)).unwrap();
        assert_eq!(w0.q, p.objective.q);
        assert_eq!(w0.r, p.objective.r);
        assert_eq!(w0.f, p.objective.f);
        assert!(weighted_costs(&p, &Multipliers::zeros(2)).is_err());
    }

    #[test]
    fn finite_example_active_constraint() {
        let p = example_a();
        let w = weighted_costs(&p, &Multipliers::from_slice(&[2.2313]).unwrap()).unwrap();
        let t = solve_finite(&p.model, &w, 2).unwrap();
        assert_abs_diff_eq!(t.z(2)[(0, 0)], 8.8945, epsilon = 1e-3);
        assert_abs_diff_eq!(t.x(2)[(0, 0)], 20.9252, epsilon = 1e-3);
        assert_abs_diff_eq!(t.z(1)[(0, 0)], 9.1251, epsilon = 1e-3);
        assert_abs_diff_eq!(t.x(1)[(0, 0)], 36.2823, epsilon = 1e-3);
        assert_eq!(t.z(3), w.f.as_ref().unwrap());
        assert_eq!(t.x(3), w.f.as_ref().unwrap());
    }

    #[test]
    fn finite_example_unconstrained() {
        let p = example_a();
        let w = weighted_costs(&p, &Multipliers::zeros(1)).unwrap();
        let t = solve_finite(&p.model, &w, 2).unwrap();
        assert_abs_diff_eq!(t.z(2)[(0, 0)], 3.1111, epsilon = 1e-3);
        assert_abs_diff_eq!(t.x(2)[(0, 0)], 12.0, epsilon = 1e-3);
        assert_abs_diff_eq!(t.z(1)[(0, 0)], 3.1545, epsilon = 1e-3);
        assert_abs_diff_eq!(t.x(1)[(0, 0)], 17.1111, epsilon = 1e-3);
    }

    #[test]
    fn no_input_reduces_to_lyapunov_recursion() {
        let mut model = scalar_model(0.7, 0.0, 0.0, 0.0);
        model.sigma2 = 0.0;
        let w = WeightedCosts {
            q: s(1.5),
            r: s(1.0),
            f: Some(s(2.0)),
        };
        let t = solve_finite(&model, &w, 6).unwrap();
        let mut z = 2.0;
        for k in (1..=6).rev() {
            z = 0.49 * z + 1.5;
            assert_abs_diff_eq!(t.z(k)[(0, 0)], z, epsilon = 1e-12);
            assert_eq!(t.x(k), t.z(k));
            assert_eq!(t.l(k)[(0, 0)], 0.0);
        }
    }

    #[test]
    fn zero_extension_beyond_horizon() {
        let mut model = scalar_model(0.9, 0.2, 1.0, 0.1);
        model.delay = 3;
        model.u_init = vec![DVector::zeros(1); 3];
        let w = WeightedCosts {
            q: s(1.0),
            r: s(1.0),
            f: Some(s(1.0)),
        };
        let t = solve_finite(&model, &w, 4).unwrap();
        assert_eq!(t.l(5)[(0, 0)], 0.0);
        assert_eq!(t.l(6)[(0, 0)], 0.0);
        // X_4 picks up only L_4 because L_5, L_6 vanish.
        assert_abs_diff_eq!(t.x(4)[(0, 0)], t.z(4)[(0, 0)] + t.l(4)[(0, 0)], epsilon = 1e-12);
        let expected = t.z(3)[(0, 0)] + t.l(3)[(0, 0)] + 0.81 * t.l(4)[(0, 0)];
        assert_abs_diff_eq!(t.x(3)[(0, 0)], expected, epsilon = 1e-12);
    }

    #[test]
    fn infinite_example_active_constraint() {
        let p = example_b();
        let w = weighted_costs(&p, &Multipliers::from_slice(&[0.6058]).unwrap()).unwrap();
        let sol = solve_infinite(&p.model, &w, &FixedPointOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.z[(0, 0)], 46.779, epsilon = 1e-2);
        assert_abs_diff_eq!(sol.x[(0, 0)], 81.1712, epsilon = 1e-2);
        assert!(sol.residual < 1e-11 * 100.0);
    }

    #[test]
    fn infinite_example_unconstrained() {
        let p = example_b();
        let w = weighted_costs(&p, &Multipliers::zeros(1)).unwrap();
        let sol = solve_infinite(&p.model, &w, &FixedPointOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.z[(0, 0)], 22.2988, epsilon = 1e-2);
        assert_abs_diff_eq!(sol.x[(0, 0)], 39.0757, epsilon = 1e-2);
    }

    #[test]
    fn scalar_lyapunov_fixed_point() {
        let model = scalar_model(0.5, 0.0, 0.0, 0.0);
        let w = WeightedCosts {
            q: s(1.0),
            r: s(1.0),
            f: None,
        };
        let sol = solve_infinite(&model, &w, &FixedPointOptions::default()).unwrap();
        assert_abs_diff_eq!(sol.z[(0, 0)], 4.0 / 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.x[(0, 0)], 4.0 / 3.0, epsilon = 1e-10);
    }

    #[test]
    fn unstabilizable_plant_is_flagged() {
        let model = scalar_model(1.3, 0.1, 0.0, 0.0);
        let w = WeightedCosts {
            q: s(1.0),
            r: s(1.0),
            f: None,
        };
        let err = solve_infinite(&model, &w, &FixedPointOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NotStabilizable { .. }));
    }

    #[test]
    fn warm_start_reaches_same_fixed_point() {
        let p = example_b();
        let opts = FixedPointOptions::default();
        let w0 = weighted_costs(&p, &Multipliers::from_slice(&[0.6]).unwrap()).unwrap();
        let w1 = weighted_costs(&p, &Multipliers::from_slice(&[0.61]).unwrap()).unwrap();
        let base = solve_infinite(&p.model, &w0, &opts).unwrap();
        let cold = solve_infinite(&p.model, &w1, &opts).unwrap();
        let warm = solve_infinite_from(&p.model, &w1, &opts, Some(&base)).unwrap();
        assert!(warm.iterations < cold.iterations);
        assert_abs_diff_eq!(warm.z[(0, 0)], cold.z[(0, 0)], epsilon = 1e-9);
        assert_abs_diff_eq!(warm.x[(0, 0)], cold.x[(0, 0)], epsilon = 1e-9);
    }
}
