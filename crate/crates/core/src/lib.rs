//! Adaptive robust MPC for vehicle lane keeping.

// Negated comparisons deliberately treat NaN as invalid input.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod controller;
pub mod estimator;
pub mod harness;
pub mod optim;
pub mod polytope;
pub mod vehicle;
pub mod verify;
