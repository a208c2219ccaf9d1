//! Command-line front end: reads a JSON problem, runs one mode, and writes a JSON report.

pub mod config;
pub mod report;
pub mod run;

use delay_lqr_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Core(e) => match e {
                Error::Invalid(_) | Error::Dimension(_) | Error::NegativeMultiplier(_) => exit::CONFIG,
                Error::NotStabilizable { .. } | Error::NotPositiveDefinite { .. } | Error::Diverging => {
                    exit::NOT_STABILIZABLE
                }
                Error::NoConvergence { .. } => exit::ITERATION_LIMIT,
                Error::ThreadPool(_) => exit::OTHER,
            },
            CliError::Io(_) => exit::OTHER,
        }
    }
}

pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    pub const INFEASIBLE: i32 = 2;
    pub const NOT_STABILIZABLE: i32 = 3;
    pub const CONFIG: i32 = 4;
    pub const ITERATION_LIMIT: i32 = 5;
}
