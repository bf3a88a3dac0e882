//! Decoupled scale-wise autoregressive image generation at desk scale.
//!
//! Images are tokenized into coarse-to-fine token maps by a residual vector
//! quantizer ([`tokenizer`]). The model predicts each scale from the previous
//! one: bidirectional attention mixes tokens inside a scale ([`attention`]),
//! a selective state-space scan carries information across scales in linear
//! time ([`scan`]). [`cost`] measures the global-attention baseline that this
//! design replaces, and [`harness`] holds data, checkpoints and training.

pub mod attention;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod image;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod scan;
pub mod schedule;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use model::{LayerMode, ModelConfig, ModelParams};
pub use scalar::Scalar;
pub use schedule::{ScaleSchedule, SequenceLayout};
pub use tensor::Mat;
pub use tokenizer::{Codebook, Tokenizer, TokenMapPyramid};
