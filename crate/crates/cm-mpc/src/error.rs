//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by dynamics, valuation, solving, and orchestration.
#[derive(Debug, Error)]
pub enum Error {
    /// Euler-rate mapping is singular: |pitch| too close to pi/2.
    #[error("euler-rate mapping singular: |pitch| = {pitch_abs:.6} rad")]
    EulerSingular { pitch_abs: f64 },

    /// A state, input, or parameter component is NaN or infinite.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    /// Integration blew up (component magnitude above the divergence bound).
    #[error("state diverged at stage {stage}")]
    Diverged { stage: usize },

    /// The deployment solver could not reduce the state-constraint
    /// violation below tolerance after the full penalty schedule.
    #[error("solve failed: max state residual {max_residual:.3e} after {iterations} iterations")]
    SolveFailed {
        max_residual: f64,
        iterations: usize,
    },

    /// A training round found no valid anchor (every trajectory shorter
    /// than horizon + 1).
    #[error("no valid anchors: trajectories too short for horizon {horizon}")]
    InsufficientData { horizon: usize },

    /// A metric window falls outside the recorded trajectory.
    #[error("metric window out of range: {context}")]
    WindowOutOfRange { context: String },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Attach a rollout stage index to propagated dynamics errors.
    pub fn at_stage(self, stage: usize) -> Self {
        match self {
            Error::Diverged { .. } => Error::Diverged { stage },
            other => other,
        }
    }

    /// Process exit code bucket: 1 usage/config, 2 numerical, 3 health gate.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Serde(_) => 1,
            _ => 2,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
