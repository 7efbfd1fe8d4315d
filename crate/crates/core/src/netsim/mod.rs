//! Deterministic network simulation.

pub mod matrix;
pub mod sim;

pub use matrix::{LatencyMatrix, MatrixError};
pub use sim::{ClassStat, Context, Effects, Endpoint, Mapped, Interceptor, NetStats, Network, PassThrough, Process, SimConfig, SimError, Simulator, Wire};
