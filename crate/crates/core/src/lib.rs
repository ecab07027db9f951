//! Few-shot prompt learning with global and class-specific local prompts,
//! where local prompts are matched to a sparse set of salient patches by
//! balanced entropic optimal transport.
//!
//! Everything runs on small frozen toy encoders and synthetic planted-part
//! data, in `f64`, with a small reverse-mode tape for gradients.
//!
//! Module map:
//! - [`numcore`]: matrices, tape, finite-difference oracle
//! - [`otcore`]: Sinkhorn solver and exact matching oracle
//! - [`encoders`]: frozen text and dual-stream vision encoders, local projection
//! - [`prompts`]: prompt bank and global prompt dropout
//! - [`align`]: saliency, top-K support, transport-weighted local score
//! - [`objective`]: class scores, losses, fusion, MCM/GL-MCM
//! - [`model`]: the full forward pass
//! - [`train`]: optimizer, schedule, epoch loop
//! - [`metrics`] and [`eval`]: evaluation
//! - [`synthdata`]: episodes and OOD pools
//! - [`suite`]: seeded oracle checks for the self-test

pub mod align;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod otcore;
pub mod prompts;
pub mod suite;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
