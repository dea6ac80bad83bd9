// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod diffnet;
pub mod encode;
pub mod eval;
pub mod experiment;
pub mod models;
pub mod skeleton;
pub mod synth;
pub mod train;
