//! Multimodal few-shot speech–image matching.
//!
//! Feature learning (autoencoders, correspondence autoencoders,
//! classifiers, Siamese encoders), unsupervised pair mining, raw-feature
//! baselines, and the episodic evaluation protocol. Model maths is generic
//! over [`Scalar`]; training uses `f32`, gradient checks use `f64`.

pub mod autodiff;
pub mod data;
pub mod dsp;
pub mod episodes;
pub mod error;
pub mod metrics;
pub mod models;
pub mod pairs;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Model = models::EncoderModel<f32>;
