//! Controller gains, predictors, and exact expected costs.
//!
//! All expectations are computed in closed form. Open-loop quantities
//! (before the first computed control acts) come from first and second
//! moments of `x_k`. Closed-loop costs propagate the second moment of the
//! augmented state `ξ_k = (x_k, u_{k-1}, …, u_{k-d})`: the feedback
//! `u_k = −K_k x̂_{k+d|k}` is linear in `ξ_k`, so
//!
//! ```text
//! ξ_{k+1} = (Φ_k + w_k Ψ) ξ_k,   E[ξξᵀ]_{k+1} = Φ_k S_k Φ_kᵀ + σ² Ψ S_k Ψᵀ.
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{outer, powers, trace_product, KahanSum};
use crate::model::{CostTerm, Horizon, Multipliers, SystemModel};
use crate::riccati::{RiccatiTrajectory, SteadySolution, WeightedCosts};

/// Feedback gains `K` for `u_k = −K x̂_{k+d|k}`.
#[derive(Debug, Clone, PartialEq)]
pub enum GainSchedule {
    /// `K_k` for `k = 0 ..= N−d`.
    Finite { gains: Vec<DMatrix<f64>>, horizon: usize },
    Infinite { gain: DMatrix<f64> },
}

impl GainSchedule {
    /// Gain acting at step `k`, `None` once no control affects the cost.
    pub fn at(&self, k: usize) -> Option<&DMatrix<f64>> {
        match self {
            GainSchedule::Finite { gains, .. } => gains.get(k),
            GainSchedule::Infinite { gain } => Some(gain),
        }
    }

    pub fn horizon(&self) -> Horizon {
        match self {
            GainSchedule::Finite { horizon, .. } => Horizon::Finite(*horizon),
            GainSchedule::Infinite { .. } => Horizon::Infinite,
        }
    }

    /// Gains in time order (a single entry for the steady law).
    pub fn matrices(&self) -> Vec<&DMatrix<f64>> {
        match self {
            GainSchedule::Finite { gains, .. } => gains.iter().collect(),
            GainSchedule::Infinite { gain } => vec![gain],
        }
    }
}

/// `K_k = Υ_{k+d}⁻¹ M_{k+d}` for `k = 0 ..= N−d`.
pub fn finite_gains(traj: &RiccatiTrajectory) -> GainSchedule {
    let d = traj.delay();
    let n = traj.horizon();
    GainSchedule::Finite {
        gains: (0..=n - d).map(|k| traj.stage(k + d).feedback.clone()).collect(),
        horizon: n,
    }
}

/// Constant `K = Υ⁻¹M` from the steady-state solution.
pub fn steady_gain(sol: &SteadySolution) -> GainSchedule {
    GainSchedule::Infinite {
        gain: sol.gain.feedback.clone(),
    }
}

/// `x̂_{k+d|k} = A^d x_k + Σ_{i=1}^{d} A^{i−1} B u_{k−i}`.
///
/// `recent_controls` is ordered `u_{k−1}` first.
pub fn predictor(model: &SystemModel, x_k: &DVector<f64>, recent_controls: &[DVector<f64>]) -> DVector<f64> {
    assert_eq!(recent_controls.len(), model.delay, "predictor needs d controls");
    let mut xhat = x_k.clone();
    // Horner form: ((x A + B u_{k−d}) A + …) evaluated from the oldest control.
    for u in recent_controls.iter().rev() {
        xhat = &model.a * xhat + &model.b * u;
    }
    xhat
}

/// First and second moments of a random vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub mean: DVector<f64>,
    /// `E[x xᵀ]`.
    pub second: DMatrix<f64>,
}

impl MomentState {
    pub fn deterministic(x: &DVector<f64>) -> Self {
        Self {
            mean: x.clone(),
            second: outer(x, x),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.second - outer(&self.mean, &self.mean)
    }

    /// Moments of `T x + b` for deterministic `T`, `b`.
    pub fn affine(&self, t: &DMatrix<f64>, b: &DVector<f64>) -> Self {
        let tm = t * &self.mean;
        let cross = outer(&tm, b);
        Self {
            mean: &tm + b,
            second: t * &self.second * t.transpose() + &cross + cross.transpose() + outer(b, b),
        }
    }
}

/// Moments of `x_0 … x_horizon` driven only by the initial controls.
pub fn open_loop_moments(model: &SystemModel, horizon: usize) -> Result<Vec<MomentState>> {
    if horizon > model.delay {
        return Err(Error::Dimension(format!(
            "open-loop moments only reach k = d = {}, asked for {horizon}",
            model.delay
        )));
    }
    let s2 = model.sigma2;
    let mut out = vec![MomentState::deterministic(&model.x0)];
    for k in 0..horizon {
        let u = &model.u_init[k];
        let prev = &out[k];
        let am = &model.a * &prev.mean;
        let bu = &model.b * u;
        let abm = &model.a_bar * &prev.mean;
        let bbu = &model.b_bar * u;
        let cross = outer(&am, &bu);
        let noisy_cross = outer(&abm, &bbu);
        let second = &model.a * &prev.second * model.a.transpose()
            + &model.a_bar * &prev.second * model.a_bar.transpose() * s2
            + &cross
            + cross.transpose()
            + (&noisy_cross + noisy_cross.transpose()) * s2
            + outer(&bu, &bu)
            + outer(&bbu, &bbu) * s2;
        out.push(MomentState { mean: am + bu, second });
    }
    Ok(out)
}

/// Moments of `x̂_{d|j} = A^{d−j} x_j + Σ_{l=1}^{d−j} A^{l−1} B u_{−l}` for `j = 0 … d−1`.
pub fn initial_predictor_moments(model: &SystemModel, moments: &[MomentState]) -> Vec<MomentState> {
    let d = model.delay;
    let a_pows = powers(&model.a, d);
    (0..d)
        .map(|j| {
            let mut b = DVector::zeros(model.state_dim());
            for l in 1..=d - j {
                b += &a_pows[l - 1] * &model.b * model.initial_control(-(l as isize));
            }
            moments[j].affine(&a_pows[d - j], &b)
        })
        .collect()
}

/// Shared shape of the finite-horizon value and its λ-derivative:
///
/// `Σ_{k<d} tr(Q S_k) + tr(X_d S_d) − Σ_{j<d} E[x̂_{d|j}ᵀ (Aᵀ)ʲ L_{d+j} Aʲ x̂_{d|j}]`.
///
/// Each predictor `x̂_{d|j}` is paired with the single correction term
/// `(Aᵀ)ʲL_{d+j}Aʲ` of the control `u_j` it feeds.
pub(crate) fn finite_value_form<'a>(
    model: &SystemModel,
    moments: &[MomentState],
    predictors: &[MomentState],
    q: &DMatrix<f64>,
    x_d: &DMatrix<f64>,
    l_at: impl Fn(usize) -> &'a DMatrix<f64>,
) -> f64 {
    let d = model.delay;
    let a_pows = powers(&model.a, d.saturating_sub(1));
    let mut acc = KahanSum::default();
    for m in moments.iter().take(d) {
        acc.add(trace_product(q, &m.second));
    }
    acc.add(trace_product(x_d, &moments[d].second));
    for (j, pm) in predictors.iter().enumerate() {
        let p = &a_pows[j];
        let w = p.transpose() * l_at(d + j) * p;
        acc.add(-trace_product(&w, &pm.second));
    }
    acc.value()
}

/// Dual function value at λ for the finite horizon: the optimal Lagrangian cost minus `λᵀc`.
pub fn dual_value_finite(
    traj: &RiccatiTrajectory,
    model: &SystemModel,
    w: &WeightedCosts,
    lam: &Multipliers,
    c: &DVector<f64>,
) -> Result<f64> {
    let moments = open_loop_moments(model, model.delay)?;
    let predictors = initial_predictor_moments(model, &moments);
    let d = model.delay;
    let value = finite_value_form(model, &moments, &predictors, &w.q, traj.x(d), |k| traj.l(k));
    Ok(value - lam.as_vector().dot(c))
}

/// Deterministic predictors `x̂_{k|k−d} = A^k x_0 + Σ_{j<k} A^{k−1−j} B u_{j−d}` for `k < d`.
pub fn steady_initial_predictors(model: &SystemModel) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(model.delay);
    let mut xhat = model.x0.clone();
    for k in 0..model.delay {
        out.push(xhat.clone());
        xhat = &model.a * xhat + &model.b * &model.u_init[k];
    }
    out
}

/// Shared shape of the infinite-horizon value and its λ-derivative:
///
/// `x₀ᵀZx₀ + Σ_{k<d} [−uᵀRu + 2uᵀM x̂_k + x̂_kᵀL x̂_k + uᵀΥu]`, `u = u_{k−d}`.
pub(crate) fn steady_value_form(
    model: &SystemModel,
    z: &DMatrix<f64>,
    r: &DMatrix<f64>,
    m: &DMatrix<f64>,
    l: &DMatrix<f64>,
    upsilon: &DMatrix<f64>,
) -> f64 {
    let mut acc = KahanSum::default();
    acc.add(model.x0.dot(&(z * &model.x0)));
    for (u, xhat) in model.u_init.iter().zip(steady_initial_predictors(model)) {
        acc.add(-u.dot(&(r * u)));
        acc.add(2.0 * u.dot(&(m * &xhat)));
        acc.add(xhat.dot(&(l * &xhat)));
        acc.add(u.dot(&(upsilon * u)));
    }
    acc.value()
}

/// Dual function value at λ for the infinite horizon.
pub fn dual_value_infinite(
    sol: &SteadySolution,
    model: &SystemModel,
    w: &WeightedCosts,
    lam: &Multipliers,
    c: &DVector<f64>,
) -> f64 {
    steady_value_form(model, &sol.z, &w.r, sol.m(), sol.l(), sol.upsilon()) - lam.as_vector().dot(c)
}

/// Closed-loop dynamics on the augmented state `(x_k, u_{k−1}, …, u_{k−d})`.
#[derive(Debug, Clone)]
pub struct AugmentedLoop {
    n: usize,
    m: usize,
    d: usize,
    /// Open-loop part of `Φ` (no control row).
    base: DMatrix<f64>,
    /// `Ψ`, the noise-multiplied part.
    noise: DMatrix<f64>,
    /// `[A^d, B, AB, …, A^{d−1}B]`: `x̂_{k+d|k} = P ξ_k`.
    predictor: DMatrix<f64>,
    pub sigma2: f64,
}

impl AugmentedLoop {
    pub fn new(model: &SystemModel) -> Self {
        let (n, m, d) = (model.state_dim(), model.input_dim(), model.delay);
        let dim = n + d * m;
        let last = n + (d - 1) * m;
        let mut base = DMatrix::zeros(dim, dim);
        let mut noise = DMatrix::zeros(dim, dim);
        base.view_mut((0, 0), (n, n)).copy_from(&model.a);
        base.view_mut((0, last), (n, m)).copy_from(&model.b);
        noise.view_mut((0, 0), (n, n)).copy_from(&model.a_bar);
        noise.view_mut((0, last), (n, m)).copy_from(&model.b_bar);
        for j in 1..d {
            base.view_mut((n + j * m, n + (j - 1) * m), (m, m))
                .copy_from(&DMatrix::identity(m, m));
        }
        let a_pows = powers(&model.a, d);
        let mut predictor = DMatrix::zeros(n, dim);
        predictor.view_mut((0, 0), (n, n)).copy_from(&a_pows[d]);
        for i in 1..=d {
            predictor
                .view_mut((0, n + (i - 1) * m), (n, m))
                .copy_from(&(&a_pows[i - 1] * &model.b));
        }
        Self {
            n,
            m,
            d,
            base,
            noise,
            predictor,
            sigma2: model.sigma2,
        }
    }

    pub fn dim(&self) -> usize {
        self.n + self.d * self.m
    }

    /// `ξ_0 = (x_0, u_{−1}, …, u_{−d})`.
    pub fn initial_state(&self, model: &SystemModel) -> DVector<f64> {
        let mut xi = DVector::zeros(self.dim());
        xi.rows_mut(0, self.n).copy_from(&model.x0);
        for i in 1..=self.d {
            xi.rows_mut(self.n + (i - 1) * self.m, self.m)
                .copy_from(model.initial_control(-(i as isize)));
        }
        xi
    }

    /// `Φ` with the control row `−K P`; a missing gain means `u_k = 0`.
    pub fn transition(&self, gain: Option<&DMatrix<f64>>) -> DMatrix<f64> {
        let mut phi = self.base.clone();
        if let Some(k) = gain {
            let row = -(k * &self.predictor);
            phi.view_mut((self.n, 0), (self.m, self.dim())).copy_from(&row);
        }
        phi
    }

    /// `P` with `x̂_{k+d|k} = P ξ_k`.
    pub fn predictor_map(&self) -> &DMatrix<f64> {
        &self.predictor
    }

    pub fn noise(&self) -> &DMatrix<f64> {
        &self.noise
    }

    /// `Φ S Φᵀ + σ² Ψ S Ψᵀ`.
    pub fn propagate(&self, phi: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
        let next = phi * s * phi.transpose() + &self.noise * s * self.noise.transpose() * self.sigma2;
        (&next + next.transpose()) * 0.5
    }

    pub fn state_block<'a>(&self, s: &'a DMatrix<f64>) -> nalgebra::DMatrixView<'a, f64> {
        s.view((0, 0), (self.n, self.n))
    }

    /// Block of `u_{k−d}`, the control acting at step `k`.
    pub fn acting_control_block<'a>(&self, s: &'a DMatrix<f64>) -> nalgebra::DMatrixView<'a, f64> {
        let last = self.n + (self.d - 1) * self.m;
        s.view((last, last), (self.m, self.m))
    }
}

/// Stopping rules for infinite-horizon cost accumulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccumulationOptions {
    /// Stop once every per-step cost is below this fraction of its running total.
    pub rel_tol: f64,
    pub max_steps: usize,
    /// Consecutive non-decreasing per-step costs that count as divergence.
    pub growth_window: usize,
}

impl Default for AccumulationOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            max_steps: 1_000_000,
            growth_window: 100,
        }
    }
}

fn stage_cost(lp: &AugmentedLoop, s: &DMatrix<f64>, term: &CostTerm, k: usize, d: usize) -> f64 {
    let mut c = trace_product(&term.q, &lp.state_block(s).into_owned());
    if k >= d {
        c += trace_product(&term.r, &lp.acting_control_block(s).into_owned());
    }
    c
}

/// Exact expected costs `J_i(u)` of several terms under one feedback law.
pub fn closed_loop_costs(model: &SystemModel, gains: &GainSchedule, terms: &[&CostTerm]) -> Result<Vec<f64>> {
    closed_loop_costs_with(model, gains, terms, &AccumulationOptions::default())
}

pub fn closed_loop_costs_with(
    model: &SystemModel,
    gains: &GainSchedule,
    terms: &[&CostTerm],
    opts: &AccumulationOptions,
) -> Result<Vec<f64>> {
    let lp = AugmentedLoop::new(model);
    let d = model.delay;
    let xi = lp.initial_state(model);
    let mut s = outer(&xi, &xi);
    let mut totals = vec![KahanSum::default(); terms.len()];

    match gains {
        GainSchedule::Finite { horizon, .. } => {
            for k in 0..=*horizon {
                for (acc, t) in totals.iter_mut().zip(terms) {
                    acc.add(stage_cost(&lp, &s, t, k, d));
                }
                s = lp.propagate(&lp.transition(gains.at(k)), &s);
            }
            for (acc, t) in totals.iter_mut().zip(terms) {
                let f = t
                    .f
                    .as_ref()
                    .ok_or_else(|| Error::Dimension("finite-horizon cost needs a terminal weight".into()))?;
                acc.add(trace_product(f, &lp.state_block(&s).into_owned()));
            }
        }
        GainSchedule::Infinite { gain } => {
            let phi = lp.transition(Some(gain));
            let mut prev_step = f64::INFINITY;
            let mut growth = 0usize;
            let mut quiet = 0usize;
            for k in 0..opts.max_steps {
                let steps: Vec<f64> = terms.iter().map(|t| stage_cost(&lp, &s, t, k, d)).collect();
                let mut settled = true;
                for (acc, &c) in totals.iter_mut().zip(&steps) {
                    acc.add(c);
                    settled &= c <= opts.rel_tol * acc.value().abs();
                }
                let step_total: f64 = steps.iter().sum();
                if !step_total.is_finite() {
                    return Err(Error::Diverging);
                }
                if step_total >= prev_step && step_total > 0.0 {
                    growth += 1;
                    if growth >= opts.growth_window {
                        return Err(Error::Diverging);
                    }
                } else {
                    growth = 0;
                }
                prev_step = step_total;
                quiet = if settled { quiet + 1 } else { 0 };
                if quiet > d {
                    break;
                }
                s = lp.propagate(&phi, &s);
            }
        }
    }
    Ok(totals.iter().map(KahanSum::value).collect())
}

/// Exact expected cost of one term under the feedback law.
pub fn closed_loop_cost(model: &SystemModel, gains: &GainSchedule, term: &CostTerm) -> Result<f64> {
    Ok(closed_loop_costs(model, gains, &[term])?[0])
}

/// `E[x_kᵀx_k]` for `k = 0 ..= steps` under the feedback law.
pub fn second_moment_profile(model: &SystemModel, gains: &GainSchedule, steps: usize) -> Vec<f64> {
    let lp = AugmentedLoop::new(model);
    let xi = lp.initial_state(model);
    let mut s = outer(&xi, &xi);
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        out.push(lp.state_block(&s).trace());
        if k < steps {
            s = lp.propagate(&lp.transition(gains.at(k)), &s);
        }
    }
    out
}
