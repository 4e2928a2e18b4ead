// NaN must fail these range checks, so `!(x > 0.0)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataset;
pub mod evaluation;
pub mod model;
pub mod signal_io;
pub mod spectral;
pub mod synth;
