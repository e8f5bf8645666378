//! Diffusion training on toy data with a memory-bank dispersive regularizer.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tensor`]), the noising processes ([`process`]), a residual MLP denoiser
//! ([`denoiser`]), the projection head, FIFO bank and dispersive losses
//! ([`repulsor`]), a Heun sampler with classifier-free guidance
//! ([`sampler`]), sample-quality metrics ([`metrics`]) and the experiment
//! harness ([`harness`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod process;
pub mod repulsor;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
