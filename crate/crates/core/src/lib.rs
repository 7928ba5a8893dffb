//! Simulation and analysis toolkit for a two-phenotype adhesion model on the
//! flat torus.
//!
//! The crate covers the microscopic diffusion–jump particle system, its
//! McKean–Vlasov limit (pseudospectral PDE solver plus i.i.d. copy sampler),
//! a reflection/optimal-spin coupling between the two, Wasserstein-1
//! estimators, and the Fourier-mode bifurcation analysis of stationary
//! states. The [`harness`] module wires these into reproducible experiments.

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bifurcation;
pub mod coupling;
pub mod error;
pub mod harness;
pub mod meanfield;
pub mod particles;
pub mod potential;
pub mod rng;
pub mod spectral;
pub mod spin;
pub mod torus;
pub mod transport;

pub use error::{Error, Result};
