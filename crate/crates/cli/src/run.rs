//! Subcommands and their reports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use delay_lqr_core::dual::{evaluate_at, Optimum, Solution};
use delay_lqr_core::evaluate::{closed_loop_costs, second_moment_profile};
use delay_lqr_core::simulate::{estimate_costs, stability_certificate, MonteCarloReport, SimulationOptions};
use delay_lqr_core::{
    ascend, ConstrainedProblem, CostTerm, DualResult, DualStatus, FixedPointOptions, GainSchedule, Horizon,
    NoiseKind,
};
use log::{info, warn};

use crate::config::{multipliers, rows, Config};
use crate::report::{
    to_json, ConstraintSection, EstimateSection, MonteCarloSection, RiccatiSection, RiccatiStage, RunReport,
    StabilitySection, Timing, TraceEntry, TraceSummary,
};
use crate::{exit, CliError};

#[derive(Debug, Parser)]
#[command(name = "delay-lqr", version, about = "Constrained stochastic LQR with input delay")]
pub struct Cli {
    #[command(subcommand)]
    pub mode: Mode,
}

#[derive(Debug, Subcommand)]
pub enum Mode {
    /// Run dual ascent to the optimal multipliers and controller.
    Solve(Options),
    /// Riccati solution, gains and dual value at fixed multipliers.
    Evaluate(Options),
    /// Solve, then cross-check costs by Monte Carlo and check KKT.
    Verify(Options),
    /// Monte Carlo rollouts of a given or computed feedback law.
    Simulate(Options),
    /// Mean-square stability certificate of a constant feedback law.
    Certify(Options),
}

#[derive(Debug, Clone, Args)]
pub struct Options {
    /// Problem file (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Step size of the multiplier update.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Stop when the multiplier step is at most this.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Multipliers, comma separated: the starting point for solve/verify,
    /// the evaluation point otherwise.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub lambda: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    /// Truncation of infinite-horizon rollouts and plot data.
    #[arg(long, default_value_t = 400)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// gaussian or rademacher.
    #[arg(long, default_value = "gaussian")]
    pub noise: NoiseKind,
    /// Write the per-iteration (n, λ, gradient, dual value) table here.
    #[arg(long)]
    pub csv_trace: Option<PathBuf>,
    /// Write (k, E[x_kᵀx_k]) pairs here.
    #[arg(long)]
    pub plot_data: Option<PathBuf>,
    /// Leave timestamps and timings out of the report.
    #[arg(long)]
    pub no_timestamp: bool,
}

pub struct Outcome {
    pub report: RunReport,
    pub json: String,
    pub exit_code: i32,
}

impl Mode {
    fn name(&self) -> &'static str {
        match self {
            Mode::Solve(_) => "solve",
            Mode::Evaluate(_) => "evaluate",
            Mode::Verify(_) => "verify",
            Mode::Simulate(_) => "simulate",
            Mode::Certify(_) => "certify",
        }
    }

    fn options(&self) -> &Options {
        match self {
            Mode::Solve(o) | Mode::Evaluate(o) | Mode::Verify(o) | Mode::Simulate(o) | Mode::Certify(o) => o,
        }
    }
}

pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let opts = cli.mode.options();
    let config = Config::load(&opts.config)?;
    let problem = config.problem()?;
    let mut report = RunReport::new(cli.mode.name(), "", config.clone());
    info!("{} {}", cli.mode.name(), opts.config.display());

    let exit_code = match &cli.mode {
        Mode::Solve(o) => solve(&config, &problem, o, &mut report, false)?,
        Mode::Verify(o) => solve(&config, &problem, o, &mut report, true)?,
        Mode::Evaluate(o) => evaluate(&config, &problem, o, &mut report)?,
        Mode::Simulate(o) => simulate(&config, &problem, o, &mut report)?,
        Mode::Certify(o) => certify(&config, &problem, o, &mut report)?,
    };

    if !opts.no_timestamp {
        report.timing = Some(Timing {
            started_unix,
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    let json = to_json(&report);
    Ok(Outcome {
        report,
        json,
        exit_code,
    })
}

fn fixed_lambda(config: &Config, problem: &ConstrainedProblem, o: &Options) -> Result<Vec<f64>, CliError> {
    let lam = o
        .lambda
        .clone()
        .or_else(|| config.lambda.clone())
        .unwrap_or_else(|| vec![0.0; problem.num_constraints()]);
    if lam.len() != problem.num_constraints() {
        return Err(CliError::Config(format!(
            "{} multipliers given for {} constraints",
            lam.len(),
            problem.num_constraints()
        )));
    }
    Ok(lam)
}

fn riccati_section(solution: &Solution) -> RiccatiSection {
    match solution {
        Solution::Finite(t) => {
            let d = t.delay();
            RiccatiSection {
                z: rows(t.z(d)),
                x: rows(t.x(d)),
                stages: (d..=t.horizon())
                    .map(|k| RiccatiStage {
                        k,
                        z: rows(t.z(k)),
                        x: rows(t.x(k)),
                    })
                    .collect(),
                iterations: None,
                residual: None,
            }
        }
        Solution::Infinite(s) => RiccatiSection {
            z: rows(&s.z),
            x: rows(&s.x),
            stages: Vec::new(),
            iterations: Some(s.iterations),
            residual: Some(s.residual),
        },
    }
}

fn fill_optimum(report: &mut RunReport, problem: &ConstrainedProblem, opt: &Optimum) {
    report.gains = opt.gains.matrices().into_iter().map(rows).collect();
    report.riccati = Some(riccati_section(&opt.point.solution));
    report.dual_value = Some(opt.point.value);
    report.objective_cost = Some(opt.objective_cost);
    report.gradient = Some(opt.point.gradient.iter().copied().collect());
    report.constraints = problem
        .constraints
        .iter()
        .zip(&opt.constraint_costs)
        .map(|(t, &cost)| ConstraintSection {
            bound: t.c.unwrap_or(f64::NAN),
            cost,
            kkt_residual: None,
        })
        .collect();
}

fn trace_entry(e: &delay_lqr_core::dual::TraceEntry) -> TraceEntry {
    TraceEntry {
        n: e.iteration,
        lambda: e.lambda.clone(),
        gradient: e.gradient.clone(),
        dual_value: e.value,
    }
}

fn write_trace(path: &Path, result: &DualResult) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    let m = result.lambda_star.len();
    let mut header = vec!["n".to_string()];
    header.extend((1..=m).map(|i| format!("lambda_{i}")));
    header.extend((1..=m).map(|i| format!("gradient_{i}")));
    header.push("dual_value".into());
    writeln!(w, "{}", header.join(","))?;
    for e in &result.trace {
        let mut row = vec![e.iteration.to_string()];
        row.extend(e.lambda.iter().chain(&e.gradient).map(|v| format!("{v:.16e}")));
        row.push(format!("{:.16e}", e.value));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn plot_horizon(gains: &GainSchedule, steps: usize) -> usize {
    match gains.horizon() {
        Horizon::Finite(n) => n + 1,
        Horizon::Infinite => steps,
    }
}

fn write_plot(
    path: &Path,
    problem: &ConstrainedProblem,
    gains: &GainSchedule,
    steps: usize,
    ensemble: Option<&[f64]>,
) -> Result<(), CliError> {
    let exact = second_moment_profile(&problem.model, gains, plot_horizon(gains, steps));
    let mut w = BufWriter::new(File::create(path)?);
    if ensemble.is_some() {
        writeln!(w, "k,second_moment,monte_carlo")?;
    } else {
        writeln!(w, "k,second_moment")?;
    }
    for (k, v) in exact.iter().enumerate() {
        match ensemble.and_then(|e| e.get(k)) {
            Some(mc) => writeln!(w, "{k},{v:.16e},{mc:.16e}")?,
            None if ensemble.is_some() => writeln!(w, "{k},{v:.16e},")?,
            None => writeln!(w, "{k},{v:.16e}")?,
        }
    }
    w.flush()?;
    Ok(())
}

fn term_names(problem: &ConstrainedProblem) -> Vec<String> {
    std::iter::once("objective".to_string())
        .chain((1..=problem.num_constraints()).map(|i| format!("constraint {i}")))
        .collect()
}

fn all_terms(problem: &ConstrainedProblem) -> Vec<&CostTerm> {
    std::iter::once(&problem.objective).chain(&problem.constraints).collect()
}

fn noise_name(n: NoiseKind) -> &'static str {
    match n {
        NoiseKind::Gaussian => "gaussian",
        NoiseKind::Rademacher => "rademacher",
    }
}

/// Runs the rollouts; returns the section, whether every exact value is covered, and the raw report.
fn monte_carlo(
    problem: &ConstrainedProblem,
    gains: &GainSchedule,
    exact: Option<&[f64]>,
    o: &Options,
) -> Result<(MonteCarloSection, bool, MonteCarloReport), CliError> {
    let sim = SimulationOptions {
        trials: o.trials,
        steps: o.steps,
        seed: o.seed,
        noise: o.noise,
        threads: o.threads,
    };
    let mc = estimate_costs(&problem.model, gains, &all_terms(problem), &sim)?;
    let mut all_covered = true;
    let estimates = mc
        .estimates
        .iter()
        .zip(term_names(problem))
        .enumerate()
        .map(|(i, (e, term))| {
            let exact = exact.map(|x| x[i]);
            let covered = exact.map(|x| e.covers(x, 3.0));
            all_covered &= covered.unwrap_or(true);
            EstimateSection {
                term,
                mean: e.mean,
                std_error: e.std_error,
                tail_bound: e.tail_bound.is_finite().then_some(e.tail_bound),
                exact,
                covered,
            }
        })
        .collect();
    let section = MonteCarloSection {
        trials: o.trials,
        steps: mc.steps,
        seed: o.seed,
        noise: noise_name(o.noise).into(),
        estimates,
    };
    Ok((section, all_covered, mc))
}

fn solve(
    config: &Config,
    problem: &ConstrainedProblem,
    o: &Options,
    report: &mut RunReport,
    verify: bool,
) -> Result<i32, CliError> {
    let mut ascent = config.ascent()?;
    if let Some(a) = o.alpha {
        ascent.alpha = a;
    }
    if let Some(t) = o.tol {
        ascent.tol = t;
    }
    if let Some(n) = o.max_iter {
        ascent.max_iter = n;
    }
    if let Some(l) = &o.lambda {
        ascent.lambda0 = Some(multipliers(l)?);
    }
    let result = ascend(problem, &ascent)?;

    report.status = result.status.to_string();
    report.reason = result.reason.clone();
    report.lambda_star = Some(result.lambda_star.to_vec());
    report.iterations = Some(result.iterations);
    if let Some(opt) = &result.optimum {
        fill_optimum(report, problem, opt);
    }
    if let Some(kkt) = &result.kkt {
        for (c, r) in report.constraints.iter_mut().zip(&kkt.residuals) {
            c.kkt_residual = Some(*r);
        }
        report.kkt_max_scaled = Some(kkt.max_scaled);
    }
    if let (Some(first), Some(last)) = (result.trace.first(), result.trace.last()) {
        report.trace = Some(TraceSummary {
            entries: result.trace.len(),
            stride: result.trace_stride,
            first: trace_entry(first),
            last: trace_entry(last),
        });
    }
    if let Some(path) = &o.csv_trace {
        write_trace(path, &result)?;
    }

    let mut code = match result.status {
        DualStatus::Optimal => exit::OK,
        DualStatus::Infeasible => exit::INFEASIBLE,
        DualStatus::NotStabilizable => exit::NOT_STABILIZABLE,
        DualStatus::IterationLimit => exit::ITERATION_LIMIT,
    };

    let mut ensemble = None;
    if let Some(opt) = &result.optimum {
        if verify && result.status == DualStatus::Optimal {
            let mut exact = vec![opt.objective_cost];
            exact.extend(&opt.constraint_costs);
            let (section, covered, mc) = monte_carlo(problem, &opt.gains, Some(&exact), o)?;
            report.monte_carlo = Some(section);
            ensemble = Some(mc.second_moment);
            let kkt_ok = report.kkt_max_scaled.is_some_and(|k| k < 1e-4);
            if !(covered && kkt_ok) {
                let why = match (covered, kkt_ok) {
                    (false, false) => "Monte Carlo estimates disagree with exact costs and KKT residual too large",
                    (false, true) => "Monte Carlo estimates disagree with exact costs",
                    _ => "KKT residual too large",
                };
                warn!("verification failed: {why}");
                report.reason = Some(why.into());
                code = exit::OTHER;
            }
        }
        if let Some(path) = &o.plot_data {
            write_plot(path, problem, &opt.gains, o.steps, ensemble.as_deref())?;
        }
    }
    Ok(code)
}

fn evaluate(config: &Config, problem: &ConstrainedProblem, o: &Options, report: &mut RunReport) -> Result<i32, CliError> {
    let lam = fixed_lambda(config, problem, o)?;
    let opt = evaluate_at(problem, &multipliers(&lam)?, &FixedPointOptions::default())?;
    report.status = "Evaluated".into();
    report.lambda_star = Some(lam);
    fill_optimum(report, problem, &opt);
    if let Some(path) = &o.plot_data {
        write_plot(path, problem, &opt.gains, o.steps, None)?;
    }
    Ok(exit::OK)
}

/// The law from the config's `gain`, or the optimal law at the fixed multipliers.
fn feedback_law(config: &Config, problem: &ConstrainedProblem, o: &Options) -> Result<GainSchedule, CliError> {
    if let Some(g) = config.gains()? {
        return Ok(g);
    }
    let lam = fixed_lambda(config, problem, o)?;
    Ok(evaluate_at(problem, &multipliers(&lam)?, &FixedPointOptions::default())?.gains)
}

fn simulate(config: &Config, problem: &ConstrainedProblem, o: &Options, report: &mut RunReport) -> Result<i32, CliError> {
    let gains = feedback_law(config, problem, o)?;
    let exact = closed_loop_costs(&problem.model, &gains, &all_terms(problem)).ok();
    let (section, _, mc) = monte_carlo(problem, &gains, exact.as_deref(), o)?;
    report.status = "Simulated".into();
    report.gains = gains.matrices().into_iter().map(rows).collect();
    report.monte_carlo = Some(section);
    if let Some(path) = &o.plot_data {
        write_plot(path, problem, &gains, o.steps, Some(&mc.second_moment))?;
    }
    Ok(exit::OK)
}

fn certify(config: &Config, problem: &ConstrainedProblem, o: &Options, report: &mut RunReport) -> Result<i32, CliError> {
    let gains = feedback_law(config, problem, o)?;
    let GainSchedule::Infinite { gain } = &gains else {
        return Err(CliError::Config("certify needs an infinite-horizon (constant) feedback law".into()));
    };
    let cert = stability_certificate(&problem.model, gain);
    report.status = if cert.stable { "Stable" } else { "Unstable" }.into();
    report.gains = vec![rows(gain)];
    report.stability = Some(StabilitySection {
        spectral_radius: cert.spectral_radius,
        stable: cert.stable,
        iterations: cert.iterations,
    });
    if let Some(path) = &o.plot_data {
        write_plot(path, problem, &gains, o.steps, None)?;
    }
    Ok(exit::OK)
}
