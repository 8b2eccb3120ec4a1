//! All-in-one image restoration at desk scale.
//!
//! A single encoder-decoder handles blur, rain, noise, and haze: generic
//! convolutional/transformer encoder, prompt-conditioned decoder. The crate
//! is self-contained: dense tensors with reverse-mode autodiff, the network
//! blocks, a synthetic degradation pipeline, an Adam/cosine trainer, quality
//! and complexity metrics, and bit-exact file formats.

pub mod error;
pub mod tensor;

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod degrade;
pub mod metrics;
pub mod model;
pub mod ppm;
pub mod train;

pub use error::{CaptError, Result};
