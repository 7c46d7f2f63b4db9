//! Text-to-face GAN laboratory.
//!
//! The pipeline runs attribute vectors through a deterministic caption
//! compiler, embeds captions with a hashed sign embedding, trains a
//! text-conditional DC-GAN with the matching-aware (GAN-CLS) objective, and
//! scores generators with the inception score.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the two precisions used in practice.

pub mod caption;
pub mod checkpoint;
pub mod embedding;
pub mod engine;
mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod imageio;
pub mod models;
mod scalar;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};

pub type Tensor32 = engine::Tensor<f32>;
pub type Tensor64 = engine::Tensor<f64>;
pub type Tape32 = engine::Tape<f32>;
pub type Tape64 = engine::Tape<f64>;
pub type Generator32 = models::Generator<f32>;
pub type Generator64 = models::Generator<f64>;
pub type Discriminator32 = models::Discriminator<f32>;
pub type Discriminator64 = models::Discriminator<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
