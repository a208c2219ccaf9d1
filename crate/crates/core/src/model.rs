//! Problem definition types and validation.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, is_positive_definite, symmetrize};

/// Relative asymmetry below which a weight is silently symmetrized.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// The delayed plant `x[k+1] = (A + w Ā) x[k] + (B + w B̄) u[k-d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub a: DMatrix<f64>,
    pub a_bar: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    /// Noise variance `σ²`.
    pub sigma2: f64,
    /// Input delay in steps.
    pub delay: usize,
    pub x0: DVector<f64>,
    /// Initial controls `u[-d], …, u[-1]`, oldest first.
    pub u_init: Vec<DVector<f64>>,
}

impl SystemModel {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// `u[j]` for `-d <= j < 0`.
    pub fn initial_control(&self, j: isize) -> &DVector<f64> {
        let d = self.delay as isize;
        assert!((-d..0).contains(&j), "initial control index {j} out of range");
        &self.u_init[(j + d) as usize]
    }

    /// The last `d` initial controls ordered `u[-1]` first, as the predictor expects.
    pub fn recent_initial_controls(&self) -> Vec<DVector<f64>> {
        self.u_init.iter().rev().cloned().collect()
    }

    fn check(&self, out: &mut Vec<Violation>) {
        let n = self.a.nrows();
        let m = self.b.ncols();
        let mut dim = |what: &str, ok: bool| {
            if !ok {
                out.push(Violation::Dimension(what.to_string()));
            }
        };
        dim("A must be square", self.a.is_square());
        dim("A_bar must be n×n", self.a_bar.shape() == (n, n));
        dim("B must have n rows", self.b.nrows() == n);
        dim("B_bar must be n×m", self.b_bar.shape() == (n, m));
        dim("x0 must have length n", self.x0.len() == n);
        if self.delay == 0 {
            out.push(Violation::ZeroDelay);
        }
        if self.u_init.len() != self.delay {
            out.push(Violation::Dimension(format!(
                "u_init must hold d = {} controls, got {}",
                self.delay,
                self.u_init.len()
            )));
        }
        if self.u_init.iter().any(|u| u.len() != m) {
            out.push(Violation::Dimension("every u_init entry must have length m".into()));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            out.push(Violation::NegativeVariance(self.sigma2));
        }
        let finite = [&self.a, &self.a_bar, &self.b, &self.b_bar]
            .iter()
            .all(|mat| mat.iter().all(|v| v.is_finite()))
            && self.x0.iter().all(|v| v.is_finite())
            && self.u_init.iter().flatten().all(|v| v.is_finite());
        if !finite {
            out.push(Violation::NonFinite("system".into()));
        }
    }
}

/// Quadratic weights `(Q, R, F)` with an optional constraint bound.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTerm {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Terminal weight; finite horizon only.
    pub f: Option<DMatrix<f64>>,
    /// Constraint bound `c_i`; absent on the objective.
    pub c: Option<f64>,
}

impl CostTerm {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, f: Option<DMatrix<f64>>) -> Self {
        Self { q, r, f, c: None }
    }

    pub fn with_bound(mut self, c: f64) -> Self {
        self.c = Some(c);
        self
    }

    /// Scalar convenience for single-state, single-input examples.
    pub fn scalar(q: f64, r: f64, f: Option<f64>) -> Self {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        Self::new(s(q), s(r), f.map(s))
    }

    fn check(&self, label: &str, n: usize, m: usize, out: &mut Vec<Violation>) {
        let mut one = |name: &str, mat: &DMatrix<f64>, dim: usize| {
            let what = format!("{label}.{name}");
            if mat.shape() != (dim, dim) {
                out.push(Violation::Dimension(format!("{what} must be {dim}×{dim}")));
            } else if mat.iter().any(|v| !v.is_finite()) {
                out.push(Violation::NonFinite(what));
            } else if asymmetry(mat) > SYMMETRY_TOL {
                out.push(Violation::NotSymmetric(what));
            } else if !is_positive_definite(&symmetrize(mat)) {
                out.push(Violation::NotPositiveDefinite(what));
            }
        };
        one("Q", &self.q, n);
        one("R", &self.r, m);
        if let Some(f) = &self.f {
            one("F", f, n);
        }
        if let Some(c) = self.c {
            if !c.is_finite() {
                out.push(Violation::NonFinite(format!("{label}.c")));
            }
        }
    }

    fn symmetrized(&self) -> Self {
        Self {
            q: symmetrize(&self.q),
            r: symmetrize(&self.r),
            f: self.f.as_ref().map(symmetrize),
            c: self.c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    Finite(usize),
    Infinite,
}

impl Horizon {
    pub fn is_finite(self) -> bool {
        matches!(self, Horizon::Finite(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedProblem {
    pub model: SystemModel,
    pub objective: CostTerm,
    pub constraints: Vec<CostTerm>,
    pub horizon: Horizon,
}

impl ConstrainedProblem {
    pub fn num_constraints(&self) -> usize {
        self.constraints.len()
    }

    /// Constraint bounds `c`, zero where a bound is missing.
    pub fn bounds(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.constraints.len(),
            self.constraints.iter().map(|t| t.c.unwrap_or(0.0)),
        )
    }

    /// Validates and returns the problem with every weight symmetrized.
    pub fn checked(self) -> Result<Self> {
        let report = validate(&self);
        if !report.is_ok() {
            return Err(Error::Invalid(report));
        }
        Ok(Self {
            objective: self.objective.symmetrized(),
            constraints: self.constraints.iter().map(CostTerm::symmetrized).collect(),
            ..self
        })
    }
}

/// Lagrange multipliers, elementwise nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers(DVector<f64>);

impl Multipliers {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::NegativeMultiplier(values.iter().copied().collect()));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(DVector::zeros(len))
    }

    /// Elementwise `max(0, v)`.
    pub fn project(values: &DVector<f64>) -> Self {
        Self(values.map(|v| if v > 0.0 { v } else { 0.0 }))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }
}

impl std::ops::Index<usize> for Multipliers {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Dimension(String),
    ZeroDelay,
    NegativeVariance(f64),
    NonFinite(String),
    NotSymmetric(String),
    NotPositiveDefinite(String),
    HorizonShorterThanDelay { horizon: usize, delay: usize },
    TerminalWeightMissing(String),
    TerminalWeightUnexpected(String),
    BoundOnObjective,
    BoundMissing(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Dimension(s) => write!(f, "dimension mismatch: {s}"),
            Violation::ZeroDelay => write!(f, "delay d must be at least 1"),
            Violation::NegativeVariance(v) => write!(f, "noise variance must be >= 0, got {v}"),
            Violation::NonFinite(s) => write!(f, "non-finite entries in {s}"),
            Violation::NotSymmetric(s) => write!(f, "{s} is not symmetric"),
            Violation::NotPositiveDefinite(s) => write!(f, "weight not positive definite: {s}"),
            Violation::HorizonShorterThanDelay { horizon, delay } => {
                write!(f, "N < d (N = {horizon}, d = {delay})")
            }
            Violation::TerminalWeightMissing(s) => {
                write!(f, "finite horizon needs terminal weight F on {s}")
            }
            Violation::TerminalWeightUnexpected(s) => {
                write!(f, "infinite horizon takes no terminal weight, found F on {s}")
            }
            Violation::BoundOnObjective => write!(f, "objective must not carry a bound c"),
            Violation::BoundMissing(i) => write!(f, "constraint {} has no bound c", i + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Checks dimensions, weights and horizon rules; never fails, only reports.
pub fn validate(problem: &ConstrainedProblem) -> ValidationReport {
    let mut out = Vec::new();
    let model = &problem.model;
    model.check(&mut out);
    let (n, m) = (model.state_dim(), model.input_dim());

    problem.objective.check("objective", n, m, &mut out);
    if problem.objective.c.is_some() {
        out.push(Violation::BoundOnObjective);
    }
    for (i, t) in problem.constraints.iter().enumerate() {
        t.check(&format!("constraint[{}]", i + 1), n, m, &mut out);
        if t.c.is_none() {
            out.push(Violation::BoundMissing(i));
        }
    }

    let terms = std::iter::once(("objective".to_string(), &problem.objective)).chain(
        problem
            .constraints
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("constraint[{}]", i + 1), t)),
    );
    match problem.horizon {
        Horizon::Finite(horizon) => {
            if horizon < model.delay {
                out.push(Violation::HorizonShorterThanDelay {
                    horizon,
                    delay: model.delay,
                });
            }
            for (label, t) in terms {
                if t.f.is_none() {
                    out.push(Violation::TerminalWeightMissing(label));
                }
            }
        }
        Horizon::Infinite => {
            for (label, t) in terms {
                if t.f.is_some() {
                    out.push(Violation::TerminalWeightUnexpected(label));
                }
            }
        }
    }
    ValidationReport { violations: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn example_a(horizon: usize) -> ConstrainedProblem {
        ConstrainedProblem {
            model: SystemModel {
                a: scalar(1.0),
                a_bar: scalar(1.0),
                b: scalar(2.0),
                b_bar: scalar(2.0),
                sigma2: 1.0,
                delay: 1,
                x0: DVector::from_element(1, 1.0),
                u_init: vec![DVector::from_element(1, -1.0)],
            },
            objective: CostTerm::scalar(2.0, 5.0, Some(5.0)),
            constraints: vec![CostTerm::scalar(2.0, 3.0, Some(1.0)).with_bound(13.25)],
            horizon: Horizon::Finite(horizon),
        }
    }

    #[test]
    fn example_problem_is_valid() {
        assert!(validate(&example_a(2)).is_ok());
    }

    #[test]
    fn zero_weight_is_not_positive_definite() {
        let mut p = example_a(2);
        p.objective.q = scalar(0.0);
        let report = validate(&p);
        assert_eq!(report.violations.len(), 1);
        assert!(report.to_string().contains("weight not positive definite"));
    }

    #[test]
    fn horizon_shorter_than_delay() {
        let report = validate(&example_a(0));
        assert!(matches!(
            report.violations[..],
            [Violation::HorizonShorterThanDelay { horizon: 0, delay: 1 }]
        ));
        assert!(report.to_string().contains("N < d"));
    }

    #[test]
    fn terminal_weight_rules() {
        let mut p = example_a(2);
        p.constraints[0].f = None;
        assert!(matches!(
            validate(&p).violations[..],
            [Violation::TerminalWeightMissing(_)]
        ));

        let mut p = example_a(2);
        p.horizon = Horizon::Infinite;
        assert_eq!(validate(&p).violations.len(), 2);
    }

    #[test]
    fn dimension_mismatches_are_reported() {
        let mut p = example_a(2);
        p.model.u_init.clear();
        p.model.x0 = DVector::zeros(2);
        let report = validate(&p);
        assert_eq!(report.violations.len(), 2);
        assert!(report
            .violations
            .iter()
            .all(|v| matches!(v, Violation::Dimension(_))));
    }

    #[test]
    fn tiny_asymmetry_is_symmetrized_large_is_rejected() {
        let mut p = example_a(2);
        p.model.a = DMatrix::identity(2, 2);
        p.model.a_bar = DMatrix::identity(2, 2);
        p.model.b = DMatrix::from_element(2, 1, 1.0);
        p.model.b_bar = DMatrix::from_element(2, 1, 1.0);
        p.model.x0 = DVector::zeros(2);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5 + 1e-14, 0.5, 2.0]);
        p.objective.q = q.clone();
        p.objective.f = Some(q.clone());
        p.constraints[0].q = q.clone();
        p.constraints[0].f = Some(q);
        let checked = p.clone().checked().unwrap();
        assert_eq!(checked.objective.q, checked.objective.q.transpose());

        p.objective.q[(0, 1)] = 0.6;
        let report = validate(&p);
        assert!(matches!(report.violations[..], [Violation::NotSymmetric(_)]));
    }

    #[test]
    fn validate_is_pure() {
        let mut p = example_a(0);
        p.objective.r = scalar(-1.0);
        assert_eq!(validate(&p), validate(&p));
    }

    #[test]
    fn multipliers_reject_negative_entries() {
        assert!(Multipliers::from_slice(&[0.0, 1.0]).is_ok());
        assert!(Multipliers::from_slice(&[-1e-3]).is_err());
        assert!(Multipliers::from_slice(&[f64::NAN]).is_err());
        assert_eq!(Multipliers::project(&DVector::from_vec(vec![-2.0, 3.0])).to_vec(), vec![0.0, 3.0]);
    }
}
