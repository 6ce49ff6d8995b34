//! Deterministic 64-bit neural substrate: matrices, adapter-capable layers,
//! optimiser, losses, gradient checking and checkpoint archives.

pub mod archive;
pub mod gradcheck;
pub mod lora;
mod matrix;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod rng;
pub mod softmax;
pub mod transformer;

pub use lora::{LoraAdapter, LoraLinear};
pub use matrix::{axpy, dot, sq_dist, Matrix};
pub use optim::{AdamW, AdamWConfig};
pub use params::Parameters;
pub use rng::{RngSeed, Stream};
pub use softmax::masked_softmax;
