//! Cost-matching learned MPC on a reduced centroidal biped.
//!
//! The toolkit learns the parameters of a constrained centroidal MPC by
//! matching its rollout-based surrogate cost-to-go against measured
//! discounted returns from closed-loop execution, then deploys the learned
//! parameters in a receding-horizon controller and scores disturbance
//! recovery against the untrained baseline.
//!
//! The pieces, bottom-up:
//!
//! - [`state`] / [`gait`]: the 18-dimensional reduced state and input,
//!   plus scheduled stance/swing phases.
//! - [`model`]: centroidal dynamics with learnable momentum gains, RK4
//!   discretization, and exact partial derivatives of the discrete map.
//! - [`objective`]: the five-term quadratic stage cost and terminal cost
//!   with diagonal learnable weights, plus exact partials.
//! - [`constraints`]: residuals, smooth violation penalties, and the hard
//!   input projection used at deployment.
//! - [`valuation`]: the surrogate action-value `Q^mpc` (forward rollout +
//!   cost/penalty accumulation), its reverse-mode parameter gradient, and
//!   the measured return-to-go `Q^meas`.
//! - [`learner`]: cost-matching loss, mini-batch gradients, projected SGD,
//!   and smoothness estimation for descent diagnostics.
//! - [`mpc`]: deployment-time single-shooting penalty solver and walking
//!   reference generation.
//! - [`plant`]: the "real" environment (gain mismatch, actuator lag,
//!   scripted pushes) and closed-loop rollout collection.
//! - [`bench`]: value-matching diagnostics and push-recovery metrics.
//! - [`config`] / [`run`] / [`io`]: run configuration, experiment
//!   orchestration (train / bench / diagnose / check-gradients), and
//!   deterministic persistence.
//!
//! Start with the runnable examples (`cargo run --release --example
//! standing_balance`) or the `cm-mpc` binary.

pub mod bench;
pub mod config;
pub mod constraints;
pub mod error;
pub mod gait;
pub mod instrument;
pub mod io;
pub mod learner;
pub mod model;
pub mod mpc;
pub mod objective;
pub mod plant;
pub mod run;
pub mod seeds;
pub mod state;
pub mod valuation;

pub use error::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;
