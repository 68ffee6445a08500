//! Co-simulation of a blind false-data-injection attacker against an AC
//! power-system state estimator.
//!
//! The operator side simulates the grid ([`powerflow`]) and runs WLS state
//! estimation with residual-based bad-data detection ([`estimation`]). The
//! attacker side sees only measurement snapshots: it learns branch topology
//! and parameters from them ([`topology`]), crafts state-bias attacks and
//! gates them on its own pseudo-residual ([`attack`]).

pub mod attack;
pub mod error;
pub mod estimation;
pub mod flow;
mod graph;
pub mod network;
pub mod powerflow;
pub mod scenario;
pub mod topology;

pub use error::{Error, Result};
pub use flow::{BranchModel, Line, SystemState};
pub use network::{MeterKind, MeterLayout, NetworkCase};
pub use powerflow::MeasurementSet;
