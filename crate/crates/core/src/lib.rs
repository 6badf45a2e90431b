//! Reaction-coordinate flows.
//!
//! An invertible flow splits a configuration `x` into a low-dimensional
//! reaction coordinate `z` and Gaussian noise `v`. The coordinate evolves by
//! Brownian dynamics in a learned Gaussian-mixture potential, which makes
//! both the equilibrium density and the transition density of `x`
//! tractable. The crate covers the full pipeline: benchmark simulation,
//! optional TICA whitening, three-phase training, and Markov-state-model
//! validation of the reduced kinetics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod diffcore;
pub mod flow;
pub mod io;
pub mod msm;
pub mod potential;
pub mod ptrans;
pub mod serde_rows;
pub mod simulate;
pub mod tica;
pub mod training;
pub mod trajectory;
pub mod error;

pub use error::{Error, Result};
