//! Calibration of compartmental epidemic models with uncertainty
//! quantification.
//!
//! Parameters are learned by ensembles of small neural networks trained
//! through a differentiable Euler–Maruyama solver, or sampled with a
//! preconditioned Langevin sampler. Both produce logs of `(parameters, loss)`
//! pairs from which marginal densities and predictive bands are built.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod calibrate;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod mcmc;
pub mod neural;
pub mod posterior;

pub use error::{Error, Result};
