//! Command-line front end: dataset generation, teacher training,
//! distillation, closed-loop evaluation, latency benchmarks, data-efficiency
//! sweeps and motion reports.
//!
//! Relative `--out` paths are placed under `$PRIMDIFF_OUT` (default
//! `runs`). Every command writes a `manifest.json` next to its outputs.

pub mod artifacts;
pub mod cli;
pub mod commands;
pub mod config;
pub mod plot;
pub mod report;
