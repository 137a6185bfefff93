//! Anytime-valid confidence sequences for double/debiased machine learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`boundary`] closed-form normal-mixture boundaries, ρ tuning and running intersections.
//! * [`scores`] linear Neyman-orthogonal scores (AIPW, partially linear, LATE, Γ-sensitivity bounds).
//! * [`crossfit`] K-fold cross-fitting, DML1/DML2 solves and sandwich variance.
//! * [`nuisance`] in-tree learners: ridge, logistic, gradient-boosted trees with pluggable loss.
//! * [`engine`] the streaming state machine that ties the pieces together.
//! * [`sim`] simulation designs and coverage experiments.
//! * [`cli`] the command-line front end.

pub mod boundary;
pub mod cli;
pub mod crossfit;
pub mod engine;
mod error;
pub mod nuisance;
pub mod scores;
pub mod sim;
mod summation;

pub use error::{Error, Result};
