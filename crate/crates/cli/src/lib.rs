//! Library half of the `defm` binary: config handling, the benchmark sweep,
//! SVG plotting and the subcommands themselves.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod commands;
pub mod config;
pub mod plot;
