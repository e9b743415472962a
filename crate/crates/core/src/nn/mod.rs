//! Differentiable layer blocks: depthwise-separable convolution, batch norm,
//! CBAM attention, the double-conv stage block and the training losses.
//!
//! Layers hold only handles into a shared [`ParamStore`]; `forward` returns a
//! cache consumed by the matching `backward`, which accumulates into a
//! [`GradStore`] and returns the input gradient.

mod attention;
mod batchnorm;
mod block;
mod conv_layer;
mod dsconv;
mod loss;
mod params;

pub use attention::{Cbam, CbamCache, ChannelAttention, SpatialAttention};
pub use batchnorm::{BatchNorm, BatchNormCache, BatchNormState, Mode};
pub use block::{ConvUnit, DoubleConv, DoubleConvCache};
pub use conv_layer::Conv2dLayer;
pub use dsconv::{DsConv, DsConvCache};
pub use loss::{loss, LossKind};
pub use params::{GradStore, Initializer, ParamId, ParamStore};
