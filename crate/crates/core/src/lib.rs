//! Measurement toolkit for structural transformation on sparse
//! country–sector–year panels.

// `!(x > 0.0)` is used on purpose: unlike `x <= 0.0` it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Numerical kernels index several parallel arrays with one loop variable.
#![allow(clippy::needless_range_loop)]

pub mod panel;
pub mod rng;
pub mod synth;
pub mod impute;
pub mod bhm;
pub mod factor;
pub mod sparse_reg;
pub mod eval;
pub mod wb_client;
pub mod cli;
