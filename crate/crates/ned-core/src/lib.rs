//! Numerical verification of nonuniform exponential dichotomies.
//!
//! The crate represents evolution families of linear nonautonomous systems,
//! fits and checks dichotomy constants `(K, alpha, eps)`, evaluates the
//! associated Green function and its integral operator, certifies roughness
//! under perturbations through the smallness quantity `theta` and a Picard
//! construction of the perturbed family, and solves the admissibility
//! fixed-point equation for weighted function-class pairs. Model problems
//! (a fractional-integral perturbed diagonal system and a nonlocal
//! integro-differential surrogate) live in [`scenarios`].

// Validation guards use `!(x > 0.0)` so NaN is rejected alongside the
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod grid;
pub mod linalg;

pub mod admissibility;
pub mod dichotomy;
pub mod flows;
pub mod green;
pub mod roughness;
pub mod scenarios;

pub use error::{Error, Result};
pub use grid::{GridFunction, Interval, ScalarGridFunction, TimeGrid, VectorGridFunction};
