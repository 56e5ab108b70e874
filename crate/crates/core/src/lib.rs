//! Prompt tuning through a diffusion denoiser, at desk scale.
//!
//! A small reverse-mode autodiff engine backs a transformer denoiser that
//! learns directional offsets for the context part of a prompt, scored by a
//! frozen toy encoder-decoder language model. The crate also ships the
//! evaluation metrics, nearest-word interpretation and the `ddpt` CLI.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod interpret;
pub mod metrics;
pub mod nn;
pub mod numerics;
#[cfg(test)]
mod testkit;
pub mod text;
pub mod toy_lm;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Precision, Tensor};
