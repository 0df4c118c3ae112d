//! Multi-exposure image fusion library.

pub mod color;
pub mod config;
pub mod error;
pub mod fusenet;
pub mod gcm;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Plane32 = color::Plane<f32>;
pub type Plane64 = color::Plane<f64>;
pub type Rgb32 = color::RgbImage<f32>;
pub type Rgb64 = color::RgbImage<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Params32 = tensor::ModelParams<f32>;
pub type Params64 = tensor::ModelParams<f64>;
