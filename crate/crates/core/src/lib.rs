//! Desk-scale latent diffusion for side-scan sonar imagery.
//!
//! The crate covers the full pipeline: an exact image/latent codec, a DDPM
//! noise schedule, a small convolutional denoiser with self- and
//! cross-attention, DDIM sampling and inversion, attention-trace style
//! transfer, low-rank (LoRA) adapters, tag-grammar text conditioning, a
//! caption gateway with a deterministic stub mode, a toy sonar dataset
//! generator, and an evaluation suite (SSIM, PSNR, FID, inception score,
//! plus a small classifier harness).
//!
//! Everything runs on CPU in `f64`, deterministically for a fixed seed.

pub mod checkpoint;
pub mod classifier;
pub mod codec;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod gateway;
pub mod image;
pub mod lora;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod style;
pub mod text;

pub use error::{Error, Result};
