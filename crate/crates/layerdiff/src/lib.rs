//! Semantic layered image editing on a compact trainable diffusion model.
//!
//! The crate splits an edit instruction into an object stream and a
//! background stream, optimizes a text embedding for each against the
//! relevant masked image region, interpolates them, briefly fine-tunes
//! the denoiser under mask-weighted losses, and samples the edited image
//! with alternating conditioning.

pub mod backend;
pub mod embedopt;
pub mod error;
pub mod eval;
pub mod exec;
pub mod finetune;
pub mod io;
pub mod masks;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod synthdata;
pub mod types;

pub use error::{Error, Result};
