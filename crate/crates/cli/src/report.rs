//! Run reports and their JSON encoding.
//!
//! Every float is written with 17 significant digits, so re-parsing a
//! report reproduces each value bit for bit.

use std::io;

use serde::ser::Serialize;
use serde::Deserialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::config::{Config, Matrix};

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub status: String,
    pub problem: Config,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_star: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient: Option<Vec<f64>>,
    /// One matrix for a steady law, `K_0 … K_{N-d}` otherwise.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gains: Vec<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub riccati: Option<RiccatiSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dual_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective_cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<ConstraintSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kkt_max_scaled: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<MonteCarloSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<StabilitySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl RunReport {
    pub fn new(mode: &str, status: &str, problem: Config) -> Self {
        Self {
            mode: mode.into(),
            status: status.into(),
            problem,
            reason: None,
            lambda_star: None,
            iterations: None,
            gradient: None,
            gains: Vec::new(),
            riccati: None,
            dual_value: None,
            objective_cost: None,
            constraints: Vec::new(),
            kkt_max_scaled: None,
            monte_carlo: None,
            stability: None,
            trace: None,
            timing: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct RiccatiStage {
    pub k: usize,
    #[serde(rename = "Z")]
    pub z: Matrix,
    #[serde(rename = "X")]
    pub x: Matrix,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct RiccatiSection {
    /// `Z`, `X` at `k = d`, or the steady-state pair.
    #[serde(rename = "Z")]
    pub z: Matrix,
    #[serde(rename = "X")]
    pub x: Matrix,
    /// Finite horizon: every stage `k = d … N`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<RiccatiStage>,
    /// Infinite horizon: fixed-point iterations and residual.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct ConstraintSection {
    pub bound: f64,
    pub cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kkt_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct EstimateSection {
    pub term: String,
    pub mean: f64,
    pub std_error: f64,
    /// `null` when the per-step cost is not decaying.
    pub tail_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covered: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct MonteCarloSection {
    pub trials: usize,
    pub steps: usize,
    pub seed: u64,
    pub noise: String,
    pub estimates: Vec<EstimateSection>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct StabilitySection {
    pub spectral_radius: f64,
    pub stable: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct TraceEntry {
    pub n: usize,
    pub lambda: Vec<f64>,
    pub gradient: Vec<f64>,
    pub dual_value: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct TraceSummary {
    pub entries: usize,
    pub stride: usize,
    pub first: TraceEntry,
    pub last: TraceEntry,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, Deserialize)]
pub struct Timing {
    pub started_unix: u64,
    pub elapsed_ms: f64,
}

/// Pretty JSON with round-trip float formatting.
struct Precise<'a>(PrettyFormatter<'a>);

impl Formatter for Precise<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Precise(PrettyFormatter::new()));
    value.serialize(&mut ser).expect("report types always serialize");
    out.push(b'\n');
    String::from_utf8(out).expect("serde_json writes UTF-8")
}
