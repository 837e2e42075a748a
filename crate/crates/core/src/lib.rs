//! Inference benchmarking harness.
//!
//! Drives external runner processes over a newline-delimited JSON protocol,
//! records per-request latency on a single monotonic clock, integrates
//! sampled power into energy, converts energy to carbon, and emits
//! Pareto-ranked reports.

pub mod cli;
pub mod clock;
pub mod energy;
pub mod loadgen;
pub mod metrics;
pub mod power;
pub mod protocol;
pub mod report;
