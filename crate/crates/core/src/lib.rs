//! Lightweight convolution transformer (LCT) for multi-channel EEG seizure
//! classification, together with the ViT and LVT baselines it is compared
//! against, the EDF ingest and segmentation pipeline, and a training and
//! evaluation harness.
//!
//! The numeric stack is generic over [`Scalar`]; `f64` is the reference
//! precision and `f32` a faster compute mode.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
mod bytes;
pub mod error;
pub mod experiment;
pub mod ingest;
pub mod models;
pub mod preprocess;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Model64 = models::Model<f64>;
pub type Model32 = models::Model<f32>;
