//! Analysis toolkit for neutral delay differential equations with a
//! sub-linear (fractional power) delayed term.
//!
//! - [`expr`]: a small expression language for coefficients, delays and
//!   nonlinearities, with symbolic differentiation.
//! - [`model`]: problem, auxiliary and history specifications plus validation.
//! - [`quadrature`]: cumulative and damped integrals, window integrals and
//!   supremum scans.
//! - [`criteria`]: contraction, Lipschitz and asymptotic criteria together
//!   with admissible initial-data bounds.
//! - [`operator`]: the fixed-point operator pair and Picard iteration.
//! - [`integrator`]: direct time stepping with dense output.

// `!(x < y)` is used on purpose so NaN falls into the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod criteria;
pub mod expr;
pub mod integrator;
pub mod model;
pub mod operator;
pub mod quadrature;
