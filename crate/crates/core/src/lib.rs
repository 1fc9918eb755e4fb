//! Numerical homogenization of fast-slow ODE systems.
//!
//! The crate estimates the bilinear operator feeding the drift and diffusion
//! of the limiting Ito SDE, simulates both the coupled fast-slow ensemble and
//! the limiting diffusion, and cross-checks the construction with a
//! finite-dimensional rough-path engine and statistical diagnostics.

pub mod error;
pub mod flow;
pub mod homog;
pub mod io;
pub mod observable;
pub mod roughpath;
pub mod rng;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
