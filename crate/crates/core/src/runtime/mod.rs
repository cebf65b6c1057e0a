//! Closed-loop orchestration: the real-time loop (measure, solve, apply, adapt,
//! log) and the slower hidden-layer trainer, plus trace metrics and comparisons.

mod closed_loop;
mod config;
mod metrics;
mod trace;

pub use closed_loop::{run_closed_loop, run_setup, TrainEvent};
pub use config::{
    ControllerSection, OracleKind, OracleSection, PlantKind, PlantSection, RunSection, Scenario,
    ScheduleConfig, Setup, Truth, JET_ENGINE_X0,
};
pub use metrics::{compare, metrics, Comparison, Metrics, SolverTimeSummary};
pub use trace::{ClosedLoopTrace, TraceMeta, TraceRow};

use thiserror::Error;

use crate::mpc::MpcError;
use crate::oracle::OracleError;
use crate::plant::PlantError;
use crate::polytope::PolytopeError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error("config error: {0}")]
    Config(String),
    #[error("MPC infeasible at the initial state {x0:?}")]
    InfeasibleAtStart { x0: Vec<f64> },
    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
}

pub type Result<T> = std::result::Result<T, RuntimeError>;
