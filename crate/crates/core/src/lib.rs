//! Temporal action segmentation over pre-computed frame features.
//!
//! The crate is built around a small reverse-mode autodiff engine
//! ([`tensor`]) and a windowed-attention encoder-decoder model ([`model`])
//! that assigns one action class to every frame of a sequence. Training
//! ([`train`]), evaluation metrics ([`metrics`]), and the on-disk data
//! formats ([`data`]) round out what the command-line tool needs.
//!
//! Everything is generic over the float type through [`scalar::Scalar`]:
//! training runs in `f32`; gradient verification against finite differences
//! uses `f64`.

pub mod data;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;
pub use tensor::{Tape, Tensor};
