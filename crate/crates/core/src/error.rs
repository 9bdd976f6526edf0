//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("mesh topology error: {0}")]
    Topology(String),
    #[error("mesh patch error: {0}")]
    Patch(String),
    #[error("mesh io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("{solver} did not converge: reached {iters} iterations, residual {residual:e} (target {target:e})")]
    NotConverged {
        solver: &'static str,
        iters: usize,
        residual: f64,
        target: f64,
    },
    #[error("{solver} breakdown: {msg}")]
    Breakdown { solver: &'static str, msg: String },
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid flow configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid mesh for flow solve: {0}")]
    InvalidMesh(String),
    #[error(
        "flow solver did not converge in {iters} iterations: momentum residual {momentum:e}, continuity residual {continuity:e} (tolerance {tolerance:e})"
    )]
    NotConverged {
        iters: usize,
        momentum: f64,
        continuity: f64,
        tolerance: f64,
    },
    #[error("linear solver failure in flow solve: {0}")]
    Linear(#[from] LinalgError),
}

#[derive(Debug, Error)]
pub enum DescentError {
    #[error("invalid descent configuration: {0}")]
    InvalidConfig(String),
    #[error("linear solver failure in descent solve: {0}")]
    Linear(#[from] LinalgError),
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("initial mesh is invalid: min cell volume {min_cell_volume:e}")]
    InvalidInitialMesh { min_cell_volume: f64 },
    #[error("flow solve failed: {0}")]
    Flow(#[from] FlowError),
    #[error("descent solve failed: {0}")]
    Descent(#[from] DescentError),
    #[error("artifact io error: {0}")]
    Io(#[from] std::io::Error),
}
