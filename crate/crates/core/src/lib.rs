//! Soft mixture-of-experts with a linear-attention combine step, inside a
//! ViT-style contrastive image/text dual encoder, together with a synthetic
//! presentation/digital-attack benchmark and anti-spoofing metrics.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below fix it to
//! `f64`, which is what the training loop, file formats and CLI use.

pub mod data;
pub mod encoder;
pub mod gradsuite;
pub mod moe;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainkit;

pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape = tensor::Tape<f64>;
pub type ParamStore = tensor::ParamStore<f64>;
