//! Desk-scale cascaded conditional diffusion engine.
//!
//! The crate trains and samples a two-stage (16x16 base, 32x32 upsampler)
//! conditional denoising diffusion pipeline over a procedurally generated
//! shapes corpus: generative pretraining on class descriptors, task-specific
//! condition heads with two-stage finetuning, an adversarially trained
//! upsampler, and (normalized) classifier-free guidance sampling.

pub mod ckpt;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod guidance;
pub mod models;
pub mod nn;
pub mod schedules;
pub mod tape;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
