//! Convolutional-transformer GANs for binary image segmentation.
//!
//! The crate is organized bottom-up:
//! - [`tensor`], [`graph`]: dense f64 tensors with reverse-mode autodiff;
//! - [`nn`]: differentiable layers (linear, attention, norms, positional encoding);
//! - [`models`]: the generator and the three discriminator variants;
//! - [`losses`], [`optim`], [`train`], [`checkpoint`]: objectives, Adam, the
//!   vanilla-GAN / CycleGAN / supervised training loops, checkpointing;
//! - [`data`]: synthetic phantom samples, PGM I/O, splits, batching;
//! - [`eval`]: thresholding, metrics, connected-component post-processing,
//!   overlays, CSV reports;
//! - [`fdcheck`], [`gradcheck`]: the finite-difference oracle and the
//!   registry that sweeps it across every operation.

pub mod error;
pub mod rng;
pub mod tensor;
mod kernels;
pub mod graph;
pub mod fdcheck;
pub mod gradcheck;
pub mod nn;
pub mod models;
pub mod losses;
pub mod optim;
pub mod checkpoint;
pub mod train;
pub mod data;
pub mod eval;

pub use error::{Error, Result};
pub use graph::{GradGraph, Var};
pub use rng::Rng;
pub use tensor::Tensor;
