//! Shared test helpers: a fixed-point big-integer oracle for the boundary formulas and
//! finite-support distributions with exact nuisances.

#![allow(dead_code)]

pub mod fixed;
pub mod support;
