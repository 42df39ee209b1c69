//! Joint VIS-IR-Label triplet generation by latent diffusion.
//!
//! The crate covers the whole desk-scale pipeline: a procedural aligned
//! triplet corpus ([`corpus`]), per-modality latent codecs ([`codecs`]),
//! prompt and scene conditioning ([`conditioning`]), scene-balanced
//! class-aware sampling ([`sbca`]), the joint diffusion model
//! ([`diffusion`]), post-denoising residual adapters ([`adapters`]), and a
//! downstream segmentation harness ([`eval`]).

pub mod adapters;
pub mod checkpoint;
pub mod codecs;
pub mod config;
pub mod conditioning;
pub mod corpus;
pub mod diffusion;
pub mod eval;
pub mod generator;
pub mod nn;
pub mod sbca;
pub mod tensor;

mod error;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
