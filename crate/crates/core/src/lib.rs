//! Coarse-to-fine video frame interpolation.
//!
//! The crate covers the flow network and its training loop, image-quality
//! metrics, and a dataset-augmentation pipeline that inserts synthesized
//! frames into recordings used for neural-rendering reconstruction.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases at the
//! crate root fix the scalar to `f32`, the type used for I/O and training.

pub mod error;
pub mod flownet;
pub mod augment;
pub mod data;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod scalar;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Frame = imaging::Frame<f32>;
pub type FlowField = warp::FlowField<f32>;
pub type OcclusionMask = warp::OcclusionMask<f32>;
pub type ModelWeights = flownet::ModelWeights<f32>;
pub type BlockOutput = flownet::BlockOutput<f32>;
