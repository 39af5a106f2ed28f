//! Benchmarks, accuracy sweeps and the command-line front end.

pub mod cli;
pub mod generate;
pub mod scaling;
pub mod sweep;
