//! doctok-core: a desk-scale implementation of a layout-aware visual token
//! compression pipeline for multi-page document understanding.
//!
//! The pipeline turns each document page into a short sequence of visual
//! tokens: shape-adaptive cropping, a small ViT-style encoder per crop,
//! horizontal 4x token merging, then cross-attention compression where
//! low-resolution global tokens query the high-resolution crop tokens that
//! cover the same spatial region. Compressed pages are assembled with image
//! ordinal markers into a single sequence for a toy autoregressive decoder.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (f32 or f64);
//! concrete aliases for the common instantiations live at the crate root.


pub mod compressor;
pub mod config;
pub mod cropper;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod reducer;
pub mod rng;
pub mod scalar;
pub mod sequencer;
pub mod serial;
pub mod synthdoc;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use rng::Rng;
pub use scalar::Scalar;

/// f32 tensor, the training instantiation.
pub type Tensor32 = tensor::Tensor<f32>;
/// f64 tensor, the gradient-checking instantiation.
pub type Tensor64 = tensor::Tensor<f64>;
