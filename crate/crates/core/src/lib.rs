//! Precipitation nowcasting with a small attention U-Net, written from the
//! tensor kernels up.
//!
//! Everything numerical is generic over [`Scalar`] (`f32` or `f64`). Training
//! and inference use `f32`; gradient checks run in `f64`.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type SmaAtUNet32 = model::SmaAtUNet<f32>;
pub type SmaAtUNet64 = model::SmaAtUNet<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type Dataset32 = data::Dataset<f32>;
