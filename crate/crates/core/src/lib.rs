//! Continual anomaly detection with per-task multimodal prompt memories.
//!
//! A frozen toy vision/text transformer provides patch features. Each task
//! stores FPS-selected identity keys, learned text and visual prompts, a
//! coreset of normal features and sigmoid calibration. Inference identifies the
//! task, scores patches against the bank and the text embedding, and fuses
//! both maps.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`).

pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod fusion;
pub mod kernels;
pub mod memory;
pub mod metrics;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod tensor;
pub mod tuning;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = tensor::Matrix<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type FeatureGrid64 = tensor::FeatureGrid<f64>;
pub type FeatureGrid32 = tensor::FeatureGrid<f32>;
pub type PatchSet64 = tensor::PatchSet<f64>;
pub type PatchSet32 = tensor::PatchSet<f32>;
pub type ScoreMap64 = tensor::ScoreMap<f64>;
pub type ScoreMap32 = tensor::ScoreMap<f32>;
pub type Image64 = tensor::Image<f64>;
pub type Image32 = tensor::Image<f32>;
pub type Backbone64 = backbone::Backbone<f64>;
pub type Backbone32 = backbone::Backbone<f32>;
pub type TaskMemory64 = memory::TaskMemory<f64>;
pub type TaskMemory32 = memory::TaskMemory<f32>;
pub type MemoryBank64 = memory::MemoryBank<f64>;
pub type MemoryBank32 = memory::MemoryBank<f32>;
