//! Neural two-step feedback policies for discrete-intervention risk-reward
//! stochastic control.
//!
//! The crate is organised bottom-up:
//!
//! - [`scenario`]: intervention time grid, Kou jump-diffusion market and
//!   i.i.d. return-path datasets (generation and binary persistence).
//! - [`recursion`]: admissible action sets, update maps, the two-step
//!   controlled recursion and performance-vector layouts.
//! - [`objectives`]: reward/risk templates, the scalarized criterion and its
//!   empirical (sample-average) form, plus exact 1D maximization over the
//!   auxiliary variable.
//! - [`nets`]: sigmoid MLPs, constraint-enforcing output maps, exact
//!   reverse-mode gradients through the recursion, and Adam.
//! - [`trainer`]: minibatch training of the policy pair and auxiliary
//!   variable.
//! - [`reference`]: grid-based backward-induction solver for the mean-CVaR
//!   decumulation instance.
//! - [`experiments`]: repeated-training studies, tail-probability tables,
//!   out-of-sample evaluation and heat-map export.
//!
//! Policy, recursion and objective code is generic over the floating-point
//! type through [`Scalar`]; the concrete `f64` aliases below are what the
//! trainer, solver and CLI use.

pub mod config;
pub mod error;
pub mod experiments;
pub mod nets;
pub mod objectives;
pub mod problem;
pub mod recursion;
pub mod reference;
pub mod scalar;
pub mod scenario;
pub mod trainer;
pub mod util;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

/// Policy pair in double precision.
pub type PolicyPair64 = nets::PolicyPair<f64>;
/// Single precision policy pair (evaluation only; training and gradient
/// checks run in `f64`).
pub type PolicyPair32 = nets::PolicyPair<f32>;
pub type NetworkParams64 = nets::NetworkParams<f64>;
pub type ObjectiveSpec64 = objectives::ObjectiveSpec<f64>;
pub type ConstraintSpec64 = recursion::ConstraintSpec<f64>;
pub type StatePath64 = recursion::StatePath<f64>;
pub type ControlProblem64 = problem::ControlProblem<f64>;
pub type RunRecord64 = trainer::RunRecord;
