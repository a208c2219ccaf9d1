//! Derivatives of the Riccati-ZXL quantities with respect to one multiplier.
//!
//! Differentiating the recursion at a fixed λ gives a linear backward
//! recursion driven by the constraint weights `(Qᵢ, Rᵢ, Fᵢ)`:
//!
//! ```text
//! ∂Υ_k = Bᵀ∂Z_{k+1}B + σ²B̄ᵀ∂X_{k+1}B̄ + Rᵢ
//! ∂M_k = Bᵀ∂Z_{k+1}A + σ²B̄ᵀ∂X_{k+1}Ā
//! ∂L_k = ∂M_kᵀΥ_k⁻¹M_k − M_kᵀΥ_k⁻¹∂Υ_kΥ_k⁻¹M_k + M_kᵀΥ_k⁻¹∂M_k
//! ∂Z_k = Aᵀ∂Z_{k+1}A + σ²Āᵀ∂X_{k+1}Ā + Qᵢ − ∂L_k
//! ∂X_k = ∂Z_k + Σ_{j<d} (Aᵀ)ʲ∂L_{k+j}Aʲ
//! ```
//!
//! The factorizations of `Υ_k` come from the Riccati solution so the
//! derivative is always taken at the λ that produced it.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{max_abs, max_abs_diff, symmetrize};
use crate::model::{CostTerm, SystemModel};
use crate::riccati::{FixedPointOptions, Plant, RiccatiTrajectory, StageGain, SteadySolution};

#[derive(Debug, Clone)]
pub struct GradientStage {
    pub d_upsilon: DMatrix<f64>,
    pub d_m: DMatrix<f64>,
    pub d_l: DMatrix<f64>,
}

/// `∂/∂λᵢ` of a [`RiccatiTrajectory`], same indexing.
#[derive(Debug, Clone)]
pub struct GradientTrajectory {
    delay: usize,
    horizon: usize,
    d_z: Vec<DMatrix<f64>>,
    d_x: Vec<DMatrix<f64>>,
    stages: Vec<GradientStage>,
    zero: DMatrix<f64>,
}

impl GradientTrajectory {
    fn idx(&self, k: usize) -> usize {
        assert!((self.delay..=self.horizon + 1).contains(&k), "stage {k} out of range");
        k - self.delay
    }

    pub fn d_z(&self, k: usize) -> &DMatrix<f64> {
        &self.d_z[self.idx(k)]
    }

    pub fn d_x(&self, k: usize) -> &DMatrix<f64> {
        &self.d_x[self.idx(k)]
    }

    /// `∂L_k`, zero beyond `N`.
    pub fn d_l(&self, k: usize) -> &DMatrix<f64> {
        if k > self.horizon {
            &self.zero
        } else {
            &self.stages[self.idx(k)].d_l
        }
    }

    pub fn stage(&self, k: usize) -> &GradientStage {
        assert!(k <= self.horizon);
        &self.stages[self.idx(k)]
    }
}

/// One derivative step given next-stage `(∂Z, ∂X)` and the stage gain at λ.
fn grad_step(
    plant: &Plant<'_>,
    gain: &StageGain,
    dz_next: &DMatrix<f64>,
    dx_next: &DMatrix<f64>,
    term: &CostTerm,
) -> (GradientStage, DMatrix<f64>) {
    let (uu, d_m) = plant.input_blocks(dz_next, dx_next);
    let d_upsilon = symmetrize(&(uu + &term.r));
    let g = &gain.feedback;
    // The first and third terms of ∂L are transposes of each other.
    let t = d_m.transpose() * g;
    let d_l = symmetrize(&(&t + t.transpose() - g.transpose() * &d_upsilon * g));
    let d_z = symmetrize(&(plant.state_block(dz_next, dx_next) + &term.q - &d_l));
    (GradientStage { d_upsilon, d_m, d_l }, d_z)
}

/// Backward derivative recursion along a finite-horizon solution.
pub fn gradient_finite(traj: &RiccatiTrajectory, model: &SystemModel, term: &CostTerm) -> Result<GradientTrajectory> {
    let f = term
        .f
        .as_ref()
        .ok_or_else(|| Error::Dimension("finite-horizon gradient needs the term's terminal weight".into()))?;
    let d = traj.delay();
    let horizon = traj.horizon();
    let plant = Plant::new(model);

    let mut d_z = vec![symmetrize(f)];
    let mut d_x = vec![symmetrize(f)];
    let mut stages = Vec::with_capacity(horizon + 1 - d);
    let mut history: VecDeque<DMatrix<f64>> = VecDeque::with_capacity(d);
    for k in (d..=horizon).rev() {
        let (stage, dz) = grad_step(&plant, traj.stage(k), d_z.last().unwrap(), d_x.last().unwrap(), term);
        let dx = symmetrize(&(&dz + plant.delayed_sum(&stage.d_l, &history)));
        history.push_front(stage.d_l.clone());
        history.truncate(d - 1);
        d_z.push(dz);
        d_x.push(dx);
        stages.push(stage);
    }
    d_z.reverse();
    d_x.reverse();
    stages.reverse();
    let n = model.state_dim();
    Ok(GradientTrajectory {
        delay: d,
        horizon,
        d_z,
        d_x,
        stages,
        zero: DMatrix::zeros(n, n),
    })
}

/// `∂/∂λᵢ` of a [`SteadySolution`].
#[derive(Debug, Clone)]
pub struct SteadyGradient {
    pub d_z: DMatrix<f64>,
    pub d_x: DMatrix<f64>,
    pub d_l: DMatrix<f64>,
    pub d_upsilon: DMatrix<f64>,
    pub d_m: DMatrix<f64>,
    pub iterations: usize,
}

/// Solves the linear steady-state derivative equations by iteration from `∂Z = ∂X = Qᵢ`.
pub fn gradient_infinite(
    sol: &SteadySolution,
    model: &SystemModel,
    term: &CostTerm,
    opts: &FixedPointOptions,
) -> Result<SteadyGradient> {
    gradient_infinite_from(sol, model, term, opts, None)
}

/// As [`gradient_infinite`], optionally starting from a previous derivative.
pub fn gradient_infinite_from(
    sol: &SteadySolution,
    model: &SystemModel,
    term: &CostTerm,
    opts: &FixedPointOptions,
    start: Option<&SteadyGradient>,
) -> Result<SteadyGradient> {
    let d = model.delay;
    let plant = Plant::new(model);
    let (mut dz, mut dx, mut history) = match start {
        Some(g) => (
            g.d_z.clone(),
            g.d_x.clone(),
            std::iter::repeat_n(g.d_l.clone(), d - 1).collect::<VecDeque<_>>(),
        ),
        None => (symmetrize(&term.q), symmetrize(&term.q), VecDeque::new()),
    };
    for iter in 1..=opts.max_iter {
        let (stage, dz_new) = grad_step(&plant, &sol.gain, &dz, &dx, term);
        let dx_new = symmetrize(&(&dz_new + plant.delayed_sum(&stage.d_l, &history)));
        history.push_front(stage.d_l.clone());
        history.truncate(d - 1);
        let scale = max_abs(&dz_new).max(max_abs(&dx_new));
        if !scale.is_finite() || scale > opts.divergence_cap {
            return Err(Error::NoConvergence { iterations: iter });
        }
        let change = max_abs_diff(&dz_new, &dz).max(max_abs_diff(&dx_new, &dx));
        dz = dz_new;
        dx = dx_new;
        if change < opts.tol * scale.max(1.0) {
            let (stage, _) = grad_step(&plant, &sol.gain, &dz, &dx, term);
            return Ok(SteadyGradient {
                d_z: dz,
                d_x: dx,
                d_l: stage.d_l,
                d_upsilon: stage.d_upsilon,
                d_m: stage.d_m,
                iterations: iter,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
    })
}
