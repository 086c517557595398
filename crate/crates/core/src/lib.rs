//! Adaptive LQR control with certainty-equivalent gains and decaying
//! exploration, together with the simulation and analysis machinery used to
//! measure its estimation error and regret rates.
//!
//! Module map:
//!
//! * [`control`]: spectral radius, Riccati solver, optimal gain.
//! * [`sysid`]: online least-squares identification of `[A, B]`.
//! * [`adaptive`]: the stepwise controller with its reset rules.
//! * [`sim`] and [`noise`]: the LQR environment, coupled noise, regret.
//! * [`analysis`]: rate fits, quantiles, Gram subspace diagnostics.
//! * [`config`] and [`sweep`]: experiment description and the Monte Carlo runner.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptive;
pub mod analysis;
pub mod config;
pub mod control;
pub mod error;
pub mod linalg;
pub mod noise;
pub mod sim;
pub mod sweep;
pub mod sysid;

pub use adaptive::{exploration_std, AlgoConfig, ControllerState, ResetReason, StepDiagnostics};
pub use analysis::{CheckpointDiag, RateFit, RateReport};
pub use config::{ExperimentConfig, SeedSpec};
pub use control::{RiccatiSolution, SystemSpec};
pub use error::{Error, Result};
pub use noise::NoiseStreams;
pub use sim::{RunOptions, RunRecord};
pub use sweep::{run_sweep, SweepOutput};
pub use sysid::{RegressionState, ThetaEstimate};
