//! Two-way neural machine translation with a 2D-LSTM over the source x
//! target grid.
//!
//! One model reads a source sentence with a causal encoder, a target
//! sentence with a second causal encoder, and runs a two-dimensional LSTM
//! over every (source position, target position) pair. Max-pooling the grid
//! along either axis gives the next-token distribution of either translation
//! direction, so a single set of parameters translates both ways.
//!
//! The numeric code is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below name the common instantiations.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = model::BidirModel<f32>;
pub type Model64 = model::BidirModel<f64>;
