//! Command-line driver: data generation, training, evaluation, OOD scoring,
//! sensitivity sweeps, plan dumps and the self-test.

pub mod commands;
pub mod config;
pub mod pipeline;
