//! Interleaved image-text generative modeling with diffusion feedback on the
//! image encoder, at desk scale.
//!
//! The crate covers the data pipeline (documents, filtering, placeholder
//! assembly, packing), the model components (encoder, resamplers, causal
//! decoder, conditional denoiser), the staged training loop, inference with
//! `<SOI>`-triggered image generation, and a yes/no robustness benchmark.

pub mod ablation;
pub mod config;
pub mod datamodel;
pub mod diffusion;
pub mod error;
pub mod foundation;
pub mod generate;
pub mod io;
pub mod lm;
pub mod model;
pub mod nn;
pub mod par;
pub mod params;
pub mod rng;
pub mod robustvqa;
pub mod sequence;
pub mod synth;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
