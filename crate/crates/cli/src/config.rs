//! JSON problem files.
//!
//! ```json
//! {
//!   "system": {"A": [[1.0]], "A_bar": [[1.0]], "B": [[2.0]], "B_bar": [[2.0]],
//!              "sigma2": 1.0, "d": 1, "x0": [1.0], "u_init": [[-1.0]]},
//!   "objective": {"Q": [[2.0]], "R": [[5.0]], "F": [[5.0]]},
//!   "constraints": [{"Q": [[2.0]], "R": [[3.0]], "F": [[1.0]], "c": 13.25}],
//!   "horizon": {"finite": 2},
//!   "ascent": {"alpha": 0.01, "tol": 1e-9, "max_iter": 1000000}
//! }
//! ```
//!
//! Matrices are arrays of rows. `u_init` lists `u_{-d} … u_{-1}`, oldest
//! first. The optional `lambda` fixes the multipliers for `evaluate`,
//! `simulate` and `certify`; the optional `gain` supplies a feedback law
//! directly (one matrix for an infinite horizon, one per step otherwise).

use std::path::Path;

use delay_lqr_core::{
    AscentConfig, ConstrainedProblem, CostTerm, DMatrix, DVector, FixedPointOptions, GainSchedule, Horizon,
    Multipliers, SystemModel,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub system: SystemSection,
    pub objective: TermSection,
    #[serde(default)]
    pub constraints: Vec<TermSection>,
    pub horizon: HorizonSection,
    #[serde(default)]
    pub ascent: AscentSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain: Option<GainSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(rename = "A")]
    pub a: Matrix,
    #[serde(rename = "A_bar")]
    pub a_bar: Matrix,
    #[serde(rename = "B")]
    pub b: Matrix,
    #[serde(rename = "B_bar")]
    pub b_bar: Matrix,
    pub sigma2: f64,
    pub d: usize,
    pub x0: Vec<f64>,
    pub u_init: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSection {
    #[serde(rename = "Q")]
    pub q: Matrix,
    #[serde(rename = "R")]
    pub r: Matrix,
    #[serde(rename = "F", default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HorizonSection {
    Finite(usize),
    Infinite,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AscentSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence_cap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backtrack: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainSection {
    Schedule(Vec<Matrix>),
    Constant(Matrix),
}

fn matrix(name: &str, rows: &Matrix) -> Result<DMatrix<f64>, CliError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(CliError::Config(format!("{name} is empty")));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(CliError::Config(format!(
            "{name}: row {} has {} entries, expected {ncols}",
            bad + 1,
            rows[bad].len()
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Rows of a matrix, for reports.
pub fn rows(m: &DMatrix<f64>) -> Matrix {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TermSection {
    fn term(&self, name: &str) -> Result<CostTerm, CliError> {
        let f = self.f.as_ref().map(|f| matrix(&format!("{name}.F"), f)).transpose()?;
        let mut t = CostTerm::new(matrix(&format!("{name}.Q"), &self.q)?, matrix(&format!("{name}.R"), &self.r)?, f);
        t.c = self.c;
        Ok(t)
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn horizon(&self) -> Horizon {
        match self.horizon {
            HorizonSection::Finite(n) => Horizon::Finite(n),
            HorizonSection::Infinite => Horizon::Infinite,
        }
    }

    /// Builds and validates the problem.
    pub fn problem(&self) -> Result<ConstrainedProblem, CliError> {
        let s = &self.system;
        let model = SystemModel {
            a: matrix("A", &s.a)?,
            a_bar: matrix("A_bar", &s.a_bar)?,
            b: matrix("B", &s.b)?,
            b_bar: matrix("B_bar", &s.b_bar)?,
            sigma2: s.sigma2,
            delay: s.d,
            x0: DVector::from_column_slice(&s.x0),
            u_init: s.u_init.iter().map(|u| DVector::from_column_slice(u)).collect(),
        };
        let constraints = self
            .constraints
            .iter()
            .enumerate()
            .map(|(i, c)| c.term(&format!("constraints[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let problem = ConstrainedProblem {
            model,
            objective: self.objective.term("objective")?,
            constraints,
            horizon: self.horizon(),
        };
        Ok(problem.checked()?)
    }

    pub fn ascent(&self) -> Result<AscentConfig, CliError> {
        let a = &self.ascent;
        let d = AscentConfig::default();
        Ok(AscentConfig {
            alpha: a.alpha.unwrap_or(d.alpha),
            tol: a.tol.unwrap_or(d.tol),
            max_iter: a.max_iter.unwrap_or(d.max_iter),
            lambda0: a.lambda0.as_deref().map(multipliers).transpose()?,
            divergence_cap: a.divergence_cap.unwrap_or(d.divergence_cap),
            backtrack: a.backtrack.unwrap_or(d.backtrack),
            fixed_point: FixedPointOptions::default(),
            ..d
        })
    }

    pub fn gains(&self) -> Result<Option<GainSchedule>, CliError> {
        let Some(g) = &self.gain else { return Ok(None) };
        let schedule = match (g, self.horizon()) {
            (GainSection::Constant(k), Horizon::Infinite) => GainSchedule::Infinite { gain: matrix("gain", k)? },
            (GainSection::Schedule(ks), Horizon::Finite(n)) => GainSchedule::Finite {
                gains: ks
                    .iter()
                    .enumerate()
                    .map(|(i, k)| matrix(&format!("gain[{i}]"), k))
                    .collect::<Result<_, _>>()?,
                horizon: n,
            },
            (GainSection::Constant(_), Horizon::Finite(_)) => {
                return Err(CliError::Config("finite horizon needs one gain matrix per step".into()))
            }
            (GainSection::Schedule(_), Horizon::Infinite) => {
                return Err(CliError::Config("infinite horizon takes a single gain matrix".into()))
            }
        };
        let (m, n) = (self.system.b.first().map_or(0, Vec::len), self.system.a.len());
        if schedule.matrices().iter().any(|k| k.shape() != (m, n)) {
            return Err(CliError::Config(format!("gain matrices must be {m}×{n}")));
        }
        Ok(Some(schedule))
    }
}

pub fn multipliers(values: &[f64]) -> Result<Multipliers, CliError> {
    Multipliers::from_slice(values).map_err(|e| CliError::Config(e.to_string()))
}
