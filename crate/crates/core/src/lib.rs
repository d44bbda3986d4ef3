//! Continuous-time partially observed stochastic optimal control with
//! observations at discrete times.
//!
//! The crate provides
//! - problem definitions and the sliding observation window ([`model`]),
//! - Euler–Maruyama rollouts and Monte Carlo evaluation ([`sim`]),
//! - particle and Kalman belief filters ([`filter`]),
//! - closed-form LQG machinery: Riccati, full-information value, separation controller ([`lqg`]),
//! - polynomial value ansatz and ridge least squares ([`regression`]),
//! - the particle fixed-point policy solver ([`pmp`]),
//! - an exact finite-state oracle for the belief-space optimality systems ([`discrete`]),
//! - scenario files and experiment drivers ([`scenario`], [`experiments`]).

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod discrete;
pub mod error;
pub mod experiments;
pub mod filter;
pub mod lqg;
pub mod model;
pub mod parallel;
pub mod pmp;
pub mod regression;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
pub use parallel::Execution;
