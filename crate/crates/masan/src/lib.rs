//! Multiscale patch autoencoders over volumetric data with attention-guided
//! structural/functional fusion, a deterministic reverse-mode tensor engine,
//! and a config-driven training and evaluation harness.
//!
//! Everything is generic over the scalar type (f32/f64 via `num-traits`);
//! the concrete aliases below fix the default 32-bit pipeline.

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod patch;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default pipeline scalar: 32-bit reals.
pub type Real = f32;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type ParamStore32 = params::ParamStore<f32>;
pub mod cli;
pub mod data;
pub mod harness;
pub mod model;
