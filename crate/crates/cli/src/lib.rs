//! Command implementations and the benchmark harness behind the `poscap`
//! binary.

pub mod benchmark;
pub mod commands;
pub mod config;
pub mod pipeline;

pub use benchmark::{run_benchmark, BenchmarkReport};
pub use config::BenchConfig;
