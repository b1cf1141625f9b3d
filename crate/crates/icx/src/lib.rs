//! In-context image customization on a tiny flow-matching transformer.
//!
//! The crate is self-contained: a reverse-mode autodiff engine over `f64`
//! buffers, a small multimodal diffusion-transformer backbone with
//! in-context multi-modal attention, rectified-flow training and sampling,
//! a synthetic data forge, and an evaluation bench. Everything is
//! deterministic given a seed.
//!
//! Start with the runnable programs under `examples/`; the `icx` binary
//! wires the same library into a pipeline-shaped CLI.

pub mod bench;
pub mod cli;
pub mod error;
pub mod flow;
pub mod forge;
pub mod geometry;
pub mod icma;
pub mod image;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
