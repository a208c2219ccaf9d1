//! Monte Carlo rollouts of the closed loop and a mean-square stability certificate.
//!
//! Each trial draws its noise from a ChaCha stream keyed by `(seed, trial)`,
//! so a trial's path does not depend on which thread runs it. Trials are
//! grouped into fixed-size chunks whose partial sums are combined in chunk
//! order, which makes every estimate bitwise identical for any thread count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluate::{AugmentedLoop, GainSchedule};
use crate::linalg::KahanSum;
use crate::model::{CostTerm, Horizon, SystemModel};

const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseKind {
    /// `N(0, σ²)`.
    #[default]
    Gaussian,
    /// `±σ` with equal probability.
    Rademacher,
}

impl NoiseKind {
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R, sigma: f64) -> f64 {
        match self {
            NoiseKind::Gaussian => sigma * rng.sample::<f64, _>(StandardNormal),
            NoiseKind::Rademacher => {
                if rng.random::<bool>() {
                    sigma
                } else {
                    -sigma
                }
            }
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(NoiseKind::Gaussian),
            "rademacher" => Ok(NoiseKind::Rademacher),
            other => Err(format!("unknown noise kind '{other}'")),
        }
    }
}

/// The RNG for one trial.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// One sample path of the closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    /// `x_0 … x_{K+1}`.
    pub states: Vec<DVector<f64>>,
    /// `u_0 … u_{K−d}`; zero where the schedule has no gain.
    pub controls: Vec<DVector<f64>>,
    /// `ω_0 … ω_K`.
    pub noises: Vec<f64>,
    /// `stage_costs[i][k]` for `k = 0 … K`, and the terminal cost of `x_{K+1}` when the term has `F`.
    pub stage_costs: Vec<Vec<f64>>,
    pub terminal_costs: Vec<f64>,
}

fn quad(w: &DMatrix<f64>, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (j, xj) in x.iter().enumerate() {
        let mut col = 0.0;
        for (i, xi) in x.iter().enumerate() {
            col += w[(i, j)] * xi;
        }
        acc += col * xj;
    }
    acc
}

/// Closed-loop stepping on `ξ_k = (x_k, u_{k−1}, …, u_{k−d})` with reusable buffers.
struct Stepper<'a> {
    model: &'a SystemModel,
    /// `K_k P`, so that `u_k = −(K_k P) ξ_k`; one entry for a constant law.
    laws: Vec<DMatrix<f64>>,
    constant: bool,
    n: usize,
    m: usize,
    xi: DVector<f64>,
    u: DVector<f64>,
    drift: DVector<f64>,
    shock: DVector<f64>,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a SystemModel, gains: &GainSchedule) -> Self {
        let lp = AugmentedLoop::new(model);
        let p = lp.predictor_map();
        let laws = gains.matrices().into_iter().map(|k| k * p).collect();
        let (n, m) = (model.state_dim(), model.input_dim());
        Self {
            model,
            laws,
            constant: matches!(gains, GainSchedule::Infinite { .. }),
            n,
            m,
            xi: lp.initial_state(model),
            u: DVector::zeros(m),
            drift: DVector::zeros(n),
            shock: DVector::zeros(n),
        }
    }

    fn x(&self) -> &[f64] {
        &self.xi.as_slice()[..self.n]
    }

    /// `u_{k−d}`, the control acting now.
    fn acting(&self) -> &[f64] {
        let last = self.n + (self.model.delay - 1) * self.m;
        &self.xi.as_slice()[last..last + self.m]
    }

    /// Computes `u_k` into the control buffer.
    fn control(&mut self, k: usize) -> &DVector<f64> {
        let law = if self.constant { self.laws.first() } else { self.laws.get(k) };
        match law {
            Some(kp) => self.u.gemv(-1.0, kp, &self.xi, 0.0),
            None => self.u.fill(0.0),
        }
        &self.u
    }

    /// `x_{k+1} = (A + wĀ)x_k + (B + wB̄)u_{k−d}`, then shifts the control history.
    fn advance(&mut self, w: f64) {
        let (n, m, d) = (self.n, self.m, self.model.delay);
        let last = n + (d - 1) * m;
        {
            let x = self.xi.rows(0, n);
            let u_act = self.xi.rows(last, m);
            self.drift.gemv(1.0, &self.model.a, &x, 0.0);
            self.drift.gemv(1.0, &self.model.b, &u_act, 1.0);
            self.shock.gemv(1.0, &self.model.a_bar, &x, 0.0);
            self.shock.gemv(1.0, &self.model.b_bar, &u_act, 1.0);
        }
        let xi = self.xi.as_mut_slice();
        xi.copy_within(n..last, n + m);
        xi[n..n + m].copy_from_slice(self.u.as_slice());
        for ((x, drift), shock) in xi[..n].iter_mut().zip(self.drift.iter()).zip(self.shock.iter()) {
            *x = drift + w * shock;
        }
    }
}

/// Rolls out `steps + 1` transitions with Gaussian noise.
pub fn rollout(model: &SystemModel, gains: &GainSchedule, steps: usize, seed: u64) -> RolloutRecord {
    rollout_with(model, gains, &[], steps, &mut trial_rng(seed, 0), NoiseKind::Gaussian)
}

/// Rolls out `x_0 … x_{steps+1}` drawing noise from `rng`, recording stage costs of `terms`.
///
/// The control is `u_k = −K_k x̂_{k+d|k}` while `k + d ≤ steps` and the
/// schedule has a gain, zero otherwise.
pub fn rollout_with<R: Rng + ?Sized>(
    model: &SystemModel,
    gains: &GainSchedule,
    terms: &[&CostTerm],
    steps: usize,
    rng: &mut R,
    noise: NoiseKind,
) -> RolloutRecord {
    let d = model.delay;
    let sigma = model.sigma2.sqrt();
    let mut st = Stepper::new(model, gains);
    let mut states = Vec::with_capacity(steps + 2);
    let mut controls = Vec::with_capacity((steps + 1).saturating_sub(d));
    let mut noises = Vec::with_capacity(steps + 1);
    let mut stage_costs = vec![Vec::with_capacity(steps + 1); terms.len()];

    for k in 0..=steps {
        states.push(DVector::from_column_slice(st.x()));
        let u = st.control(k).clone();
        if k + d <= steps {
            controls.push(u);
        }
        for (costs, t) in stage_costs.iter_mut().zip(terms) {
            let mut c = quad(&t.q, st.x());
            if k >= d {
                c += quad(&t.r, st.acting());
            }
            costs.push(c);
        }
        let w = noise.sample(rng, sigma);
        noises.push(w);
        st.advance(w);
    }
    states.push(DVector::from_column_slice(st.x()));

    let terminal_costs = terms
        .iter()
        .map(|t| t.f.as_ref().map_or(0.0, |f| quad(f, st.x())))
        .collect();
    RolloutRecord {
        states,
        controls,
        noises,
        stage_costs,
        terminal_costs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationOptions {
    pub trials: usize,
    /// Truncation for infinite-horizon laws; finite schedules use their horizon.
    pub steps: usize,
    pub seed: u64,
    pub noise: NoiseKind,
    pub threads: usize,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            trials: 10_000,
            steps: 400,
            seed: 0,
            noise: NoiseKind::Gaussian,
            threads: 1,
        }
    }
}

/// Sample means of the parts of one cost term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    pub state: f64,
    pub control: f64,
    pub terminal: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(trials)`.
    pub std_error: f64,
    pub trials: usize,
    /// Extrapolated cost beyond the truncation (zero for finite horizons,
    /// infinite when the per-step cost is not decaying).
    pub tail_bound: f64,
    pub breakdown: CostBreakdown,
}

impl CostEstimate {
    /// Whether `value` lies within `k` standard errors plus the tail bound.
    pub fn covers(&self, value: f64, k: f64) -> bool {
        (value - self.mean).abs() <= k * self.std_error + self.tail_bound
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloReport {
    pub estimates: Vec<CostEstimate>,
    /// Ensemble mean of `x_kᵀx_k`, `k = 0 … steps + 1`.
    pub second_moment: Vec<f64>,
    pub steps: usize,
}

/// Running moments combinable in a fixed order (Chan et al.).
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.count += 1.0;
        let delta = v - self.mean;
        self.mean += delta / self.count;
        self.m2 += delta * (v - self.mean);
    }

    fn merge(&mut self, o: &Moments) {
        if o.count == 0.0 {
            return;
        }
        let n = self.count + o.count;
        let delta = o.mean - self.mean;
        self.mean += delta * o.count / n;
        self.m2 += o.m2 + delta * delta * self.count * o.count / n;
        self.count = n;
    }
}

#[derive(Debug, Clone)]
struct Partial {
    totals: Vec<Moments>,
    state: Vec<KahanSum>,
    control: Vec<KahanSum>,
    terminal: Vec<KahanSum>,
    /// Per-step cost sums over the last decile, per term.
    tail: Vec<Vec<KahanSum>>,
    second_moment: Vec<KahanSum>,
}

impl Partial {
    fn new(terms: usize, steps: usize, tail_len: usize) -> Self {
        Self {
            totals: vec![Moments::default(); terms],
            state: vec![KahanSum::default(); terms],
            control: vec![KahanSum::default(); terms],
            terminal: vec![KahanSum::default(); terms],
            tail: vec![vec![KahanSum::default(); tail_len]; terms],
            second_moment: vec![KahanSum::default(); steps + 2],
        }
    }

    fn merge(&mut self, o: &Partial) {
        for i in 0..self.totals.len() {
            self.totals[i].merge(&o.totals[i]);
            self.state[i].add(o.state[i].value());
            self.control[i].add(o.control[i].value());
            self.terminal[i].add(o.terminal[i].value());
            for (a, b) in self.tail[i].iter_mut().zip(&o.tail[i]) {
                a.add(b.value());
            }
        }
        for (a, b) in self.second_moment.iter_mut().zip(&o.second_moment) {
            a.add(b.value());
        }
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `Σ_{j≥1} c ρʲ` with `ρ` fitted to the last decile of mean per-step costs.
fn tail_bound(per_step: &[f64]) -> f64 {
    let len = per_step.len();
    if len < 2 {
        return 0.0;
    }
    let half = len / 2;
    let first: f64 = per_step[..half].iter().sum::<f64>() / half as f64;
    let second: f64 = per_step[len - half..].iter().sum::<f64>() / half as f64;
    let last = per_step[len - 1];
    if first <= 0.0 || last <= 0.0 {
        return 0.0;
    }
    let rho = (second / first).powf(1.0 / (len - half) as f64);
    if rho < 1.0 {
        last * rho / (1.0 - rho)
    } else {
        f64::INFINITY
    }
}

/// Sample means and standard errors of each `Jᵢ` over independent rollouts.
pub fn estimate_costs(
    model: &SystemModel,
    gains: &GainSchedule,
    terms: &[&CostTerm],
    opts: &SimulationOptions,
) -> Result<MonteCarloReport> {
    if opts.trials < 2 {
        return Err(Error::Dimension(format!("need at least 2 trials, got {}", opts.trials)));
    }
    let (steps, finite) = match gains.horizon() {
        Horizon::Finite(n) => (n, true),
        Horizon::Infinite => (opts.steps, false),
    };
    if steps < model.delay {
        return Err(Error::Dimension(format!("steps {steps} shorter than the delay {}", model.delay)));
    }
    let sigma = model.sigma2.sqrt();
    let tail_len = if finite { 0 } else { ((steps + 1) / 10).max(2) };
    let nterms = terms.len();
    let chunks = opts.trials.div_ceil(CHUNK);

    let run_chunk = |c: usize| -> Partial {
        let mut part = Partial::new(nterms, steps, tail_len);
        for trial in c * CHUNK..((c + 1) * CHUNK).min(opts.trials) {
            let mut rng = trial_rng(opts.seed, trial as u64);
            let mut st = Stepper::new(model, gains);
            let mut state = vec![KahanSum::default(); nterms];
            let mut control = vec![KahanSum::default(); nterms];
            let tail_start = steps + 1 - tail_len;
            for k in 0..=steps {
                part.second_moment[k].add(norm2(st.x()));
                st.control(k);
                for (i, t) in terms.iter().enumerate() {
                    let sc = quad(&t.q, st.x());
                    let cc = if k >= model.delay { quad(&t.r, st.acting()) } else { 0.0 };
                    state[i].add(sc);
                    control[i].add(cc);
                    if k >= tail_start {
                        part.tail[i][k - tail_start].add(sc + cc);
                    }
                }
                st.advance(opts.noise.sample(&mut rng, sigma));
            }
            part.second_moment[steps + 1].add(norm2(st.x()));
            for (i, t) in terms.iter().enumerate() {
                let terminal = match (&t.f, finite) {
                    (Some(f), true) => quad(f, st.x()),
                    _ => 0.0,
                };
                part.totals[i].push(state[i].value() + control[i].value() + terminal);
                part.state[i].add(state[i].value());
                part.control[i].add(control[i].value());
                part.terminal[i].add(terminal);
            }
        }
        part
    };

    let partials: Vec<Partial> = if opts.threads <= 1 {
        (0..chunks).map(run_chunk).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| Error::ThreadPool(e.to_string()))?;
        pool.install(|| (0..chunks).into_par_iter().map(run_chunk).collect())
    };

    let mut total = Partial::new(nterms, steps, tail_len);
    for p in &partials {
        total.merge(p);
    }
    let n = opts.trials as f64;
    let estimates = (0..nterms)
        .map(|i| {
            let mom = total.totals[i];
            let var = if mom.count > 1.0 { mom.m2 / (mom.count - 1.0) } else { 0.0 };
            let per_step: Vec<f64> = total.tail[i].iter().map(|s| s.value() / n).collect();
            CostEstimate {
                mean: mom.mean,
                std_error: (var.max(0.0) / n).sqrt(),
                trials: opts.trials,
                tail_bound: if finite { 0.0 } else { tail_bound(&per_step) },
                breakdown: CostBreakdown {
                    state: total.state[i].value() / n,
                    control: total.control[i].value() / n,
                    terminal: total.terminal[i].value() / n,
                },
            }
        })
        .collect();
    Ok(MonteCarloReport {
        estimates,
        second_moment: total.second_moment.iter().map(|s| s.value() / n).collect(),
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityCertificate {
    /// Spectral radius of `S ↦ ΦSΦᵀ + σ²ΨSΨᵀ` on the augmented state.
    pub spectral_radius: f64,
    pub stable: bool,
    pub iterations: usize,
}

/// Mean-square stability of the constant law `u_k = −K x̂_{k+d|k}`.
///
/// Power iteration from `S = I` on the second-moment operator, with the
/// growth of `tr S` as the eigenvalue estimate. If the ratio never settles
/// (several eigenvalues of equal modulus), the geometric mean growth over
/// the second half of the run is used.
pub fn stability_certificate(model: &SystemModel, gain: &DMatrix<f64>) -> StabilityCertificate {
    const TOL: f64 = 1e-10;
    const MAX_ITER: usize = 200_000;
    let lp = AugmentedLoop::new(model);
    let phi = lp.transition(Some(gain));
    let mut s = DMatrix::identity(lp.dim(), lp.dim()) / lp.dim() as f64;
    let mut prev = f64::NAN;
    let mut log_growth = Vec::new();
    for iter in 1..=MAX_ITER {
        let next = lp.propagate(&phi, &s);
        let ratio = next.trace() / s.trace();
        if ratio <= 0.0 || !ratio.is_finite() {
            let r = if ratio.is_finite() { 0.0 } else { f64::INFINITY };
            return StabilityCertificate {
                spectral_radius: r,
                stable: r < 1.0,
                iterations: iter,
            };
        }
        if (ratio - prev).abs() < TOL * ratio.max(1.0) {
            return StabilityCertificate {
                spectral_radius: ratio,
                stable: ratio < 1.0,
                iterations: iter,
            };
        }
        log_growth.push(ratio.ln());
        prev = ratio;
        s = &next / next.trace();
    }
    let tail = &log_growth[MAX_ITER / 2..];
    let r = (tail.iter().sum::<f64>() / tail.len() as f64).exp();
    StabilityCertificate {
        spectral_radius: r,
        stable: r < 1.0,
        iterations: MAX_ITER,
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::evaluate::closed_loop_cost;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn model(a: f64, a_bar: f64, b: f64, b_bar: f64) -> SystemModel {
        SystemModel {
            a: s(a),
            a_bar: s(a_bar),
            b: s(b),
            b_bar: s(b_bar),
            sigma2: 1.0,
            delay: 1,
            x0: v(1.0),
            u_init: vec![v(-1.0)],
        }
    }

    #[test]
    fn noiseless_rollout_is_deterministic_recursion() {
        let mut m = model(1.0, 1.0, 2.0, 2.0);
        m.sigma2 = 0.0;
        let g = GainSchedule::Finite {
            gains: vec![s(0.4554), s(0.4159)],
            horizon: 2,
        };
        let rec = rollout(&m, &g, 2, 3);
        // x1 = 1 + 2(−1) = −1, u0 = −0.4554·(x0 + 2u_{−1}) = 0.4554.
        assert_abs_diff_eq!(rec.states[1][0], -1.0);
        assert_abs_diff_eq!(rec.controls[0][0], 0.4554, epsilon = 1e-15);
        let x2 = -1.0 + 2.0 * 0.4554;
        assert_abs_diff_eq!(rec.states[2][0], x2, epsilon = 1e-15);
        let u1 = -0.4159 * (-1.0 + 2.0 * 0.4554);
        assert_abs_diff_eq!(rec.controls[1][0], u1, epsilon = 1e-15);
        assert_abs_diff_eq!(rec.states[3][0], x2 + 2.0 * u1, epsilon = 1e-15);
        assert_eq!(rec.states.len(), 4);
        assert_eq!(rec.controls.len(), 2);
        assert_eq!(rec.noises.len(), 3);
    }

    #[test]
    fn rollout_replays_bitwise() {
        let m = model(1.3, 0.1, 0.2, 0.1);
        let g = GainSchedule::Infinite { gain: s(2.65) };
        assert_eq!(rollout(&m, &g, 50, 11), rollout(&m, &g, 50, 11));
        assert_ne!(rollout(&m, &g, 50, 11), rollout(&m, &g, 50, 12));
    }

    #[test]
    fn recorded_path_satisfies_dynamics() {
        let m = model(1.3, 0.1, 0.2, 0.1);
        let g = GainSchedule::Infinite { gain: s(2.65) };
        let rec = rollout(&m, &g, 30, 5);
        for k in 0..=30 {
            let u = if k == 0 { &m.u_init[0] } else { &rec.controls[k - 1] };
            let w = rec.noises[k];
            let expect = (&m.a + &m.a_bar * w) * &rec.states[k] + (&m.b + &m.b_bar * w) * u;
            assert_abs_diff_eq!(rec.states[k + 1][0], expect[0], epsilon = 1e-12 * expect[0].abs().max(1.0));
        }
    }

    #[test]
    fn zero_initial_data_estimates_zero() {
        let mut m = model(1.3, 0.1, 0.2, 0.1);
        m.x0 = v(0.0);
        m.u_init = vec![v(0.0)];
        let g = GainSchedule::Infinite { gain: s(2.65) };
        let t = CostTerm::scalar(1.0, 1.0, None);
        let opts = SimulationOptions {
            trials: 100,
            steps: 50,
            ..Default::default()
        };
        let rep = estimate_costs(&m, &g, &[&t], &opts).unwrap();
        assert_eq!(rep.estimates[0].mean, 0.0);
        assert_eq!(rep.estimates[0].std_error, 0.0);
    }

    #[test]
    fn estimates_independent_of_thread_count() {
        let m = model(1.3, 0.1, 0.2, 0.1);
        let g = GainSchedule::Infinite { gain: s(2.65) };
        let t = CostTerm::scalar(1.0, 1.0, None);
        let base = SimulationOptions {
            trials: 1000,
            steps: 100,
            seed: 9,
            ..Default::default()
        };
        let one = estimate_costs(&m, &g, &[&t], &base).unwrap();
        let four = estimate_costs(&m, &g, &[&t], &SimulationOptions { threads: 4, ..base }).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn finite_estimate_covers_exact_cost() {
        let m = model(1.0, 1.0, 2.0, 2.0);
        let g = GainSchedule::Finite {
            gains: vec![s(0.4554), s(0.4159)],
            horizon: 2,
        };
        let t = CostTerm::scalar(2.0, 5.0, Some(5.0));
        let exact = closed_loop_cost(&m, &g, &t).unwrap();
        let opts = SimulationOptions {
            trials: 20_000,
            seed: 1,
            ..Default::default()
        };
        for noise in [NoiseKind::Gaussian, NoiseKind::Rademacher] {
            let est = &estimate_costs(&m, &g, &[&t], &SimulationOptions { noise, ..opts }).unwrap().estimates[0];
            assert!(est.covers(exact, 4.0), "{noise:?}: {} ± {} vs {exact}", est.mean, est.std_error);
            let b = est.breakdown;
            assert_abs_diff_eq!(b.state + b.control + b.terminal, est.mean, epsilon = 1e-9 * est.mean);
        }
    }

    #[test]
    fn certificate_examples() {
        let m = model(1.3, 0.1, 0.2, 0.1);
        let c = stability_certificate(&m, &s(0.0));
        assert_abs_diff_eq!(c.spectral_radius, 1.70, epsilon = 1e-8);
        assert!(!c.stable);
        assert!(stability_certificate(&m, &s(2.650791705)).stable);

        let dead = model(0.0, 0.0, 0.2, 0.1);
        let c = stability_certificate(&dead, &s(0.0));
        assert_eq!(c.spectral_radius, 0.0);
        assert!(c.stable);
    }

    #[test]
    fn tail_bound_of_geometric_sequence() {
        let seq: Vec<f64> = (0..10).map(|k| 0.5f64.powi(k)).collect();
        assert_abs_diff_eq!(tail_bound(&seq), 0.5f64.powi(9), epsilon = 1e-12);
        assert_eq!(tail_bound(&[1.0, 1.0, 1.0, 1.0]), f64::INFINITY);
    }
}
