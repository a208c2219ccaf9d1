//! Projected gradient ascent on the Lagrange multipliers.
//!
//! For fixed `λ ≥ 0` the dual function `φ(λ)` is the optimal cost of the
//! unconstrained problem with weights `Q(λ), R(λ), F(λ)`, minus `λᵀc`. Its
//! gradient is `Jᵢ(u*_λ) − cᵢ`, assembled in closed form from the derivative
//! recursion. [`ascend`] iterates `λ ← max{0, λ + α∇φ(λ)}` until the step is
//! below tolerance.

use log::{debug, info};
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::evaluate::{
    closed_loop_costs, dual_value_finite, dual_value_infinite, finite_gains, finite_value_form,
    initial_predictor_moments, open_loop_moments, steady_gain, steady_value_form, GainSchedule,
    MomentState,
};
use crate::model::{ConstrainedProblem, CostTerm, Horizon, Multipliers, SystemModel};
use crate::riccati::{
    solve_finite, solve_infinite, solve_infinite_from, weighted_costs, FixedPointOptions, RiccatiTrajectory,
    SteadySolution, WeightedCosts,
};
use crate::sensitivity::{gradient_finite, gradient_infinite_from, SteadyGradient};

#[derive(Debug, Clone, PartialEq)]
pub struct AscentConfig {
    /// Step size α.
    pub alpha: f64,
    /// Stop once `‖λⁿ⁺¹ − λⁿ‖∞ ≤ tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Starting point; zeros when `None`.
    pub lambda0: Option<Multipliers>,
    /// A multiplier above this with a still-positive gradient means infeasible.
    pub divergence_cap: f64,
    /// Halve the step while the dual value would decrease.
    pub backtrack: bool,
    /// Trace entries kept before thinning.
    pub trace_cap: usize,
    pub fixed_point: FixedPointOptions,
    /// Iterations between infeasibility certificate checks (0 disables them).
    pub certificate_interval: usize,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            tol: 1e-9,
            max_iter: 10_000_000,
            lambda0: None,
            divergence_cap: 1e6,
            backtrack: false,
            trace_cap: 100_000,
            fixed_point: FixedPointOptions::default(),
            certificate_interval: 1000,
        }
    }
}

impl AscentConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Dimension(format!("step size must be positive, got {}", self.alpha)));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::Dimension(format!("tolerance must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Dimension("max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualStatus {
    Optimal,
    Infeasible,
    NotStabilizable,
    IterationLimit,
}

impl std::fmt::Display for DualStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DualStatus::Optimal => "Optimal",
            DualStatus::Infeasible => "Infeasible",
            DualStatus::NotStabilizable => "NotStabilizable",
            DualStatus::IterationLimit => "IterationLimit",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub lambda: Vec<f64>,
    pub gradient: Vec<f64>,
    pub value: f64,
}

/// Riccati solution at a multiplier: the whole trajectory or the fixed point.
#[derive(Debug, Clone)]
pub enum Solution {
    Finite(RiccatiTrajectory),
    Infinite(SteadySolution),
}

/// Dual value, gradient, and inner solution at one `λ`.
#[derive(Debug, Clone)]
pub struct DualPoint {
    pub lambda: Multipliers,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub solution: Solution,
}

impl DualPoint {
    pub fn gains(&self) -> GainSchedule {
        match &self.solution {
            Solution::Finite(t) => finite_gains(t),
            Solution::Infinite(s) => steady_gain(s),
        }
    }
}

/// Everything recomputed at the final multiplier.
#[derive(Debug, Clone)]
pub struct Optimum {
    pub point: DualPoint,
    pub gains: GainSchedule,
    pub objective_cost: f64,
    pub constraint_costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    pub costs: Vec<f64>,
    /// `λᵢ(Jᵢ − cᵢ)`.
    pub residuals: Vec<f64>,
    /// `max |λᵢ(Jᵢ − cᵢ)| / max(1, |cᵢ|)`.
    pub max_scaled: f64,
}

#[derive(Debug, Clone)]
pub struct DualResult {
    pub status: DualStatus,
    pub lambda_star: Multipliers,
    pub iterations: usize,
    /// Thinned to at most `trace_cap` entries; `trace_stride` apart.
    pub trace: Vec<TraceEntry>,
    pub trace_stride: usize,
    pub optimum: Option<Optimum>,
    pub kkt: Option<KktReport>,
    /// Why the run stopped, when not optimal.
    pub reason: Option<String>,
}

impl DualResult {
    pub fn kkt_residuals(&self) -> Option<&[f64]> {
        self.kkt.as_ref().map(|k| k.residuals.as_slice())
    }
}

/// Evaluates the dual function, reusing the previous fixed point as a warm start.
pub struct DualOracle<'a> {
    problem: &'a ConstrainedProblem,
    opts: FixedPointOptions,
    bounds: DVector<f64>,
    moments: Vec<MomentState>,
    predictors: Vec<MomentState>,
    warm: Option<SteadySolution>,
    warm_grads: Vec<Option<SteadyGradient>>,
}

impl<'a> DualOracle<'a> {
    pub fn new(problem: &'a ConstrainedProblem, opts: FixedPointOptions) -> Result<Self> {
        let model = &problem.model;
        let moments = match problem.horizon {
            Horizon::Finite(_) => open_loop_moments(model, model.delay)?,
            Horizon::Infinite => Vec::new(),
        };
        let predictors = if moments.is_empty() {
            Vec::new()
        } else {
            initial_predictor_moments(model, &moments)
        };
        Ok(Self {
            problem,
            opts,
            bounds: problem.bounds(),
            moments,
            predictors,
            warm: None,
            warm_grads: vec![None; problem.num_constraints()],
        })
    }

    pub fn problem(&self) -> &ConstrainedProblem {
        self.problem
    }

    pub fn evaluate(&mut self, lam: &Multipliers) -> Result<DualPoint> {
        let problem = self.problem;
        let model = &problem.model;
        let w = weighted_costs(problem, lam)?;
        let mut gradient = DVector::zeros(problem.num_constraints());
        let (value, solution) = match problem.horizon {
            Horizon::Finite(n) => {
                let traj = solve_finite(model, &w, n)?;
                let value = dual_value_finite(&traj, model, &w, lam, &self.bounds)?;
                for (i, term) in problem.constraints.iter().enumerate() {
                    let g = gradient_finite(&traj, model, term)?;
                    let d = model.delay;
                    gradient[i] =
                        finite_value_form(model, &self.moments, &self.predictors, &term.q, g.d_x(d), |k| g.d_l(k))
                            - self.bounds[i];
                }
                (value, Solution::Finite(traj))
            }
            Horizon::Infinite => {
                let sol = solve_infinite_from(model, &w, &self.opts, self.warm.as_ref())?;
                let value = dual_value_infinite(&sol, model, &w, lam, &self.bounds);
                for (i, term) in problem.constraints.iter().enumerate() {
                    let g = gradient_infinite_from(&sol, model, term, &self.opts, self.warm_grads[i].as_ref())
                        .map_err(|e| match e {
                            Error::NoConvergence { iterations } => Error::NotStabilizable {
                                reason: format!("derivative iteration did not settle in {iterations} iterations"),
                            },
                            other => other,
                        })?;
                    gradient[i] = steady_value_form(model, &g.d_z, &term.r, &g.d_m, &g.d_l, &g.d_upsilon)
                        - self.bounds[i];
                    self.warm_grads[i] = Some(g);
                }
                self.warm = Some(sol.clone());
                (value, Solution::Infinite(sol))
            }
        };
        Ok(DualPoint {
            lambda: lam.clone(),
            value,
            gradient,
            solution,
        })
    }
}

/// `φ(λ)` without the gradient.
pub fn dual_value(problem: &ConstrainedProblem, lam: &Multipliers, opts: &FixedPointOptions) -> Result<f64> {
    let model = &problem.model;
    let w = weighted_costs(problem, lam)?;
    let c = problem.bounds();
    match problem.horizon {
        Horizon::Finite(n) => dual_value_finite(&solve_finite(model, &w, n)?, model, &w, lam, &c),
        Horizon::Infinite => Ok(dual_value_infinite(&solve_infinite(model, &w, opts)?, model, &w, lam, &c)),
    }
}

/// `∇φ(λ)` for a finite-horizon problem.
pub fn dual_gradient_finite(problem: &ConstrainedProblem, lam: &Multipliers) -> Result<DVector<f64>> {
    if !problem.horizon.is_finite() {
        return Err(Error::Dimension("expected a finite-horizon problem".into()));
    }
    Ok(DualOracle::new(problem, FixedPointOptions::default())?.evaluate(lam)?.gradient)
}

/// `∇φ(λ)` for an infinite-horizon problem.
pub fn dual_gradient_infinite(
    problem: &ConstrainedProblem,
    lam: &Multipliers,
    opts: &FixedPointOptions,
) -> Result<DVector<f64>> {
    if problem.horizon.is_finite() {
        return Err(Error::Dimension("expected an infinite-horizon problem".into()));
    }
    Ok(DualOracle::new(problem, *opts)?.evaluate(lam)?.gradient)
}

/// Optimal value of `Σ wᵢ(Jᵢ(u) − cᵢ)` over all controls, constraints only.
fn weighted_minimum(
    model: &SystemModel,
    w: &WeightedCosts,
    horizon: Horizon,
    weights: &Multipliers,
    c: &DVector<f64>,
    opts: &FixedPointOptions,
) -> Result<f64> {
    match horizon {
        Horizon::Finite(n) => dual_value_finite(&solve_finite(model, w, n)?, model, w, weights, c),
        Horizon::Infinite => Ok(dual_value_infinite(&solve_infinite(model, w, opts)?, model, w, weights, c)),
    }
}

/// `min_u J(u)` for a single cost term.
pub fn minimum_cost(
    model: &SystemModel,
    term: &CostTerm,
    horizon: Horizon,
    opts: &FixedPointOptions,
) -> Result<f64> {
    let w = WeightedCosts::of_term(term);
    weighted_minimum(model, &w, horizon, &Multipliers::zeros(0), &DVector::zeros(0), opts)
}

/// Certificate that no control meets every bound: some `μ ≥ 0, μ ≠ 0` with
/// `min_u Σ μᵢ(Jᵢ(u) − cᵢ) > 0`. Returns that minimum when it is positive.
///
/// `None` means this direction proves nothing, including when the weighted
/// problem cannot be solved.
pub fn infeasibility_certificate(
    problem: &ConstrainedProblem,
    direction: &DVector<f64>,
    opts: &FixedPointOptions,
) -> Option<f64> {
    let total: f64 = direction.iter().map(|v| v.max(0.0)).sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    let mu = Multipliers::project(&(direction / total));
    let w = WeightedCosts::combine(None, &problem.constraints, mu.as_vector().as_slice());
    let c = problem.bounds();
    let r = weighted_minimum(&problem.model, &w, problem.horizon, &mu, &c, opts).ok()?;
    let margin = 1e-9 * c.amax().max(1.0);
    (r > margin).then_some(r)
}

/// Complementary-slackness residuals `λᵢ(Jᵢ(u) − cᵢ)` for the given law.
pub fn kkt_check(problem: &ConstrainedProblem, lam_star: &Multipliers, gains: &GainSchedule) -> Result<KktReport> {
    let terms: Vec<&CostTerm> = problem.constraints.iter().collect();
    let costs = closed_loop_costs(&problem.model, gains, &terms)?;
    let c = problem.bounds();
    let residuals: Vec<f64> = costs
        .iter()
        .enumerate()
        .map(|(i, j)| if lam_star[i] == 0.0 { 0.0 } else { lam_star[i] * (j - c[i]) })
        .collect();
    let max_scaled = residuals
        .iter()
        .zip(c.iter())
        .map(|(r, ci)| r.abs() / ci.abs().max(1.0))
        .fold(0.0, f64::max);
    Ok(KktReport {
        costs,
        residuals,
        max_scaled,
    })
}

/// Riccati solution, gains, and exact costs at a fixed `λ`.
pub fn evaluate_at(problem: &ConstrainedProblem, lam: &Multipliers, opts: &FixedPointOptions) -> Result<Optimum> {
    let point = DualOracle::new(problem, *opts)?.evaluate(lam)?;
    finish(problem, point)
}

fn finish(problem: &ConstrainedProblem, point: DualPoint) -> Result<Optimum> {
    let gains = point.gains();
    let mut terms: Vec<&CostTerm> = vec![&problem.objective];
    terms.extend(problem.constraints.iter());
    let costs = closed_loop_costs(&problem.model, &gains, &terms)?;
    Ok(Optimum {
        point,
        gains,
        objective_cost: costs[0],
        constraint_costs: costs[1..].to_vec(),
    })
}

struct Trace {
    entries: Vec<TraceEntry>,
    stride: usize,
    cap: usize,
}

impl Trace {
    fn new(cap: usize) -> Self {
        Self {
            entries: Vec::new(),
            stride: 1,
            cap: cap.max(2),
        }
    }

    fn record(&mut self, iteration: usize, p: &DualPoint) {
        if !iteration.is_multiple_of(self.stride) {
            return;
        }
        if self.entries.len() >= self.cap {
            let mut keep = 0usize;
            self.entries.retain(|_| {
                keep += 1;
                keep % 2 == 1
            });
            self.stride *= 2;
            if !iteration.is_multiple_of(self.stride) {
                return;
            }
        }
        self.push(iteration, p);
    }

    fn push(&mut self, iteration: usize, p: &DualPoint) {
        self.entries.push(TraceEntry {
            iteration,
            lambda: p.lambda.to_vec(),
            gradient: p.gradient.iter().copied().collect(),
            value: p.value,
        });
    }

    fn finish(&mut self, iteration: usize, p: &DualPoint) {
        if self.entries.last().is_none_or(|e| e.iteration != iteration) {
            self.push(iteration, p);
        }
    }
}

fn stop(status: DualStatus, lam: Multipliers, iterations: usize, trace: Trace, reason: String) -> DualResult {
    info!("dual ascent stopped: {status} after {iterations} iterations ({reason})");
    DualResult {
        status,
        lambda_star: lam,
        iterations,
        trace: trace.entries,
        trace_stride: trace.stride,
        optimum: None,
        kkt: None,
        reason: Some(reason),
    }
}

fn not_stabilizable(e: Error) -> std::result::Result<String, Error> {
    match e {
        Error::NotStabilizable { reason } => Ok(reason),
        Error::NotPositiveDefinite { stage } => Ok(format!("Υ not positive definite at stage {stage}")),
        other => Err(other),
    }
}

fn certify(problem: &ConstrainedProblem, directions: &[DVector<f64>], opts: &FixedPointOptions) -> Option<String> {
    directions.iter().find_map(|mu| {
        infeasibility_certificate(problem, mu, opts).map(|r| {
            let dir: Vec<String> = mu.iter().map(|v| format!("{v:.6}")).collect();
            format!("min over controls of the weighted constraint excess is {r:.6e} > 0 along μ = [{}]", dir.join(", "))
        })
    })
}

/// Projected gradient ascent from `config.lambda0`.
///
/// Problem-level failures (infeasible, not stabilizable, iteration limit)
/// are reported through [`DualResult::status`]; `Err` is reserved for
/// malformed input.
pub fn ascend(problem: &ConstrainedProblem, config: &AscentConfig) -> Result<DualResult> {
    config.check()?;
    let m = problem.num_constraints();
    let mut lam = match &config.lambda0 {
        Some(l) if l.len() != m => {
            return Err(Error::Dimension(format!("lambda0 has {} entries for {m} constraints", l.len())))
        }
        Some(l) => l.clone(),
        None => Multipliers::zeros(m),
    };
    let mut trace = Trace::new(config.trace_cap);
    let mut oracle = DualOracle::new(problem, config.fixed_point)?;
    let fp = &config.fixed_point;

    if config.certificate_interval > 0 {
        let axes: Vec<DVector<f64>> = (0..m)
            .map(|i| DVector::from_fn(m, |j, _| if i == j { 1.0 } else { 0.0 }))
            .collect();
        if let Some(reason) = certify(problem, &axes, fp) {
            return Ok(stop(DualStatus::Infeasible, lam, 0, trace, reason));
        }
    }

    let mut point = match oracle.evaluate(&lam) {
        Ok(p) => p,
        Err(e) => return not_stabilizable(e).map(|r| stop(DualStatus::NotStabilizable, lam, 0, trace, r)),
    };

    for n in 0..config.max_iter {
        trace.record(n, &point);

        if let Some(i) = (0..m).find(|&i| lam[i] > config.divergence_cap && point.gradient[i] > 0.0) {
            let reason = format!("multiplier {} exceeded {:e} with positive gradient", i + 1, config.divergence_cap);
            return Ok(stop(DualStatus::Infeasible, lam, n, trace, reason));
        }
        if config.certificate_interval > 0 && n % config.certificate_interval == 0 {
            let dirs = [point.gradient.map(|g| g.max(0.0)), lam.as_vector().clone()];
            if let Some(reason) = certify(problem, &dirs, fp) {
                return Ok(stop(DualStatus::Infeasible, lam, n, trace, reason));
            }
        }

        let mut step = config.alpha;
        let (next_lam, next_point) = loop {
            let cand = Multipliers::project(&(lam.as_vector() + &point.gradient * step));
            let cand_point = match oracle.evaluate(&cand) {
                Ok(p) => p,
                Err(e) => {
                    return not_stabilizable(e).map(|r| stop(DualStatus::NotStabilizable, cand, n + 1, trace, r))
                }
            };
            let decreased = cand_point.value < point.value - 1e-12 * point.value.abs().max(1.0);
            if config.backtrack && decreased && step > config.alpha * 1e-9 {
                step *= 0.5;
                continue;
            }
            break (cand, cand_point);
        };

        let change = (next_lam.as_vector() - lam.as_vector()).amax();
        lam = next_lam;
        point = next_point;
        if n % 10_000 == 0 {
            debug!("iteration {n}: λ = {:?}, φ = {:.12}, step {change:.3e}", lam.to_vec(), point.value);
        }
        if change <= config.tol {
            let iterations = n + 1;
            trace.finish(iterations, &point);
            info!("dual ascent converged after {iterations} iterations: λ* = {:?}", lam.to_vec());
            let optimum = finish(problem, point)?;
            let kkt = kkt_check(problem, &lam, &optimum.gains)?;
            return Ok(DualResult {
                status: DualStatus::Optimal,
                lambda_star: lam,
                iterations,
                trace: trace.entries,
                trace_stride: trace.stride,
                optimum: Some(optimum),
                kkt: Some(kkt),
                reason: None,
            });
        }
    }

    trace.finish(config.max_iter, &point);
    let mut result = stop(
        DualStatus::IterationLimit,
        lam.clone(),
        config.max_iter,
        trace,
        format!("no convergence within {} iterations", config.max_iter),
    );
    if let Ok(opt) = finish(problem, point) {
        result.kkt = kkt_check(problem, &lam, &opt.gains).ok();
        result.optimum = Some(opt);
    }
    Ok(result)
}
