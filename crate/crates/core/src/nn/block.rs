use super::batchnorm::{BatchNorm, BatchNormCache};
use super::conv_layer::Conv2dLayer;
use super::dsconv::{DsConv, DsConvCache};
use super::params::{GradStore, Initializer, ParamStore};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{relu, relu_backward, Tensor};

/// 3×3 convolution unit of a stage block.
#[derive(Clone, Debug)]
pub enum ConvUnit {
    Separable(DsConv),
    /// Full 3×3 convolution, used only by the baseline reference network.
    Standard(Conv2dLayer),
}

#[derive(Clone, Debug)]
pub enum ConvUnitCache<T> {
    Separable(DsConvCache<T>),
    Standard(Tensor<T>),
}

impl ConvUnit {
    fn infer<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            ConvUnit::Separable(c) => c.infer(p, x),
            ConvUnit::Standard(c) => c.infer(p, x),
        }
    }

    fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, ConvUnitCache<T>)> {
        match self {
            ConvUnit::Separable(c) => {
                let (y, cache) = c.forward(p, x)?;
                Ok((y, ConvUnitCache::Separable(cache)))
            }
            ConvUnit::Standard(c) => Ok((c.infer(p, x)?, ConvUnitCache::Standard(x.clone()))),
        }
    }

    fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &ConvUnitCache<T>,
        grad_out: &Tensor<T>,
        grads: &mut GradStore<T>,
    ) -> Result<Tensor<T>> {
        match (self, cache) {
            (ConvUnit::Separable(c), ConvUnitCache::Separable(k)) => c.backward(p, k, grad_out, grads),
            (ConvUnit::Standard(c), ConvUnitCache::Standard(x)) => c.backward(p, x, grad_out, grads),
            _ => Err(crate::error::Error::State("conv unit cache kind mismatch".into())),
        }
    }
}

/// Two `conv → batch_norm → relu` units; the first maps C_in→C_out, the second C_out→C_out.
#[derive(Clone, Debug)]
pub struct DoubleConv<T> {
    pub conv1: ConvUnit,
    pub bn1: BatchNorm<T>,
    pub conv2: ConvUnit,
    pub bn2: BatchNorm<T>,
    c_out: usize,
}

#[derive(Clone, Debug)]
pub struct DoubleConvCache<T> {
    conv1: ConvUnitCache<T>,
    bn1: BatchNormCache<T>,
    pre1: Tensor<T>,
    conv2: ConvUnitCache<T>,
    bn2: BatchNormCache<T>,
    pre2: Tensor<T>,
}

impl<T: Scalar> DoubleConv<T> {
    /// The depthwise-separable stage block.
    pub fn separable(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        multiplier: usize,
    ) -> Result<Self> {
        let conv1 = DsConv::new(store, init, &format!("{prefix}.dsc1"), c_in, c_out, multiplier)?;
        let bn1 = BatchNorm::new(store, &format!("{prefix}.bn1"), c_out)?;
        let conv2 = DsConv::new(store, init, &format!("{prefix}.dsc2"), c_out, c_out, multiplier)?;
        let bn2 = BatchNorm::new(store, &format!("{prefix}.bn2"), c_out)?;
        Ok(DoubleConv {
            conv1: ConvUnit::Separable(conv1),
            bn1,
            conv2: ConvUnit::Separable(conv2),
            bn2,
            c_out,
        })
    }

    pub fn standard(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let conv1 = Conv2dLayer::new(store, init, &format!("{prefix}.conv1"), c_in, c_out, 3)?;
        let bn1 = BatchNorm::new(store, &format!("{prefix}.bn1"), c_out)?;
        let conv2 = Conv2dLayer::new(store, init, &format!("{prefix}.conv2"), c_out, c_out, 3)?;
        let bn2 = BatchNorm::new(store, &format!("{prefix}.bn2"), c_out)?;
        Ok(DoubleConv {
            conv1: ConvUnit::Standard(conv1),
            bn1,
            conv2: ConvUnit::Standard(conv2),
            bn2,
            c_out,
        })
    }

    pub fn separable_param_count(c_in: usize, c_out: usize, multiplier: usize) -> usize {
        DsConv::param_count(c_in, c_out, multiplier) + DsConv::param_count(c_out, c_out, multiplier) + 4 * c_out
    }

    pub fn standard_param_count(c_in: usize, c_out: usize) -> usize {
        Conv2dLayer::param_count(c_in, c_out, 3) + Conv2dLayer::param_count(c_out, c_out, 3) + 4 * c_out
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn batch_norms(&self) -> [&BatchNorm<T>; 2] {
        [&self.bn1, &self.bn2]
    }

    pub fn batch_norms_mut(&mut self) -> [&mut BatchNorm<T>; 2] {
        [&mut self.bn1, &mut self.bn2]
    }

    pub fn infer(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv1.infer(p, x)?;
        let y = relu(&self.bn1.infer(p, &y)?);
        let y = self.conv2.infer(p, &y)?;
        Ok(relu(&self.bn2.infer(p, &y)?))
    }

    pub fn forward(&mut self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, DoubleConvCache<T>)> {
        let (y, conv1) = self.conv1.forward(p, x)?;
        let (pre1, bn1) = self.bn1.forward(p, &y)?;
        let a1 = relu(&pre1);
        let (y, conv2) = self.conv2.forward(p, &a1)?;
        let (pre2, bn2) = self.bn2.forward(p, &y)?;
        let out = relu(&pre2);
        Ok((
            out,
            DoubleConvCache {
                conv1,
                bn1,
                pre1,
                conv2,
                bn2,
                pre2,
            },
        ))
    }

    pub fn backward(
        &self,
        p: &ParamStore<T>,
        cache: &DoubleConvCache<T>,
        grad_out: &Tensor<T>,
        grads: &mut GradStore<T>,
    ) -> Result<Tensor<T>> {
        let g = relu_backward(&cache.pre2, grad_out)?;
        let g = self.bn2.backward(p, &cache.bn2, &g, grads)?;
        let g = self.conv2.backward(p, &cache.conv2, &g, grads)?;
        let g = relu_backward(&cache.pre1, &g)?;
        let g = self.bn1.backward(p, &cache.bn1, &g, grads)?;
        self.conv1.backward(p, &cache.conv1, &g, grads)
    }
}
