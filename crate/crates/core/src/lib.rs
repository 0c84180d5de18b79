//! Continuous-time modeling of latent-code sequences.
//!
//! A sequence of latent vectors with timestamps is treated as discrete-time
//! observations of one continuous trajectory: the trajectory of the first
//! code under a learned first-order vector field `dz/dt = f(z, t)`. The
//! field is a small MLP trained by backpropagating through an unrolled
//! fixed-step Runge-Kutta integration of the observation window; inference
//! integrates the fitted field with adaptive Dormand-Prince 5(4) to evaluate
//! the state at arbitrary times.
//!
//! On top of the fitted trajectory the crate provides uniform k-division
//! interpolation, first-frame edit propagation (offset the initial state and
//! re-integrate), a linear-morphing baseline for comparison, synthetic
//! ground-truth systems for end-to-end verification, a deterministic toy
//! image decoder with optimization-based inversion, and MSE/SSIM metrics.

pub mod decoder;
pub mod dynamics;
pub mod edit;
pub mod error;
pub mod io;
pub mod metrics;
pub mod solver;
pub mod synthetic;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};
