//! Constrained stochastic LQR for discrete-time systems with input delay and
//! multiplicative noise.
//!
//! The plant is
//!
//! ```text
//! x[k+1] = (A + w[k] Ā) x[k] + (B + w[k] B̄) u[k-d]
//! ```
//!
//! with scalar white noise `w[k]` of variance `σ²`. A quadratic objective is
//! minimised subject to quadratic cost constraints `J_i(u) <= c_i`. The
//! constrained problem is solved through its Lagrange dual: for a fixed
//! multiplier vector the inner problem is an unconstrained delayed LQR solved
//! by the coupled Z/X/L Riccati recursion ([`riccati`]), the dual gradient
//! comes from differentiating that recursion ([`sensitivity`]), and the
//! multipliers are updated by projected gradient ascent ([`dual`]).
//!
//! Every expectation is evaluated exactly by second-moment propagation
//! ([`evaluate`]) and can be cross-checked by seeded Monte Carlo rollouts
//! ([`simulate`]).

pub mod dual;
pub mod error;
pub mod evaluate;
pub mod linalg;
pub mod model;
pub mod riccati;
pub mod sensitivity;
pub mod simulate;

pub use dual::{ascend, AscentConfig, DualResult, DualStatus, KktReport};
pub use error::{Error, Result};
pub use evaluate::{GainSchedule, MomentState};
pub use model::{
    validate, ConstrainedProblem, CostTerm, Horizon, Multipliers, SystemModel, ValidationReport,
    Violation,
};
pub use riccati::{FixedPointOptions, RiccatiTrajectory, SteadySolution, WeightedCosts};
pub use sensitivity::{GradientTrajectory, SteadyGradient};
pub use simulate::{CostEstimate, NoiseKind, RolloutRecord, StabilityCertificate};

pub use nalgebra::{DMatrix, DVector};
