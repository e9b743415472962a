use super::params::{GradStore, Initializer, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv2d, conv2d_backward, ConvSpec, Tensor};

/// Depthwise-separable 3×3 convolution: a per-channel 3×3 spatial pass with
/// depth multiplier `k`, then a biased 1×1 pointwise mix.
#[derive(Clone, Debug)]
pub struct DsConv {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub multiplier: usize,
}

#[derive(Clone, Debug)]
pub struct DsConvCache<T> {
    input: Tensor<T>,
    mid: Tensor<T>,
}

impl DsConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        multiplier: usize,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 || multiplier == 0 {
            return Err(Error::config(format!(
                "{prefix}: channels and multiplier must be positive"
            )));
        }
        let mid = multiplier * c_in;
        let depthwise = store.register(
            format!("{prefix}.depthwise.weight"),
            init.he_uniform([mid, 1, 3, 3], 9),
        )?;
        let pointwise = store.register(
            format!("{prefix}.pointwise.weight"),
            init.he_uniform([c_out, mid, 1, 1], mid),
        )?;
        let bias = store.register(format!("{prefix}.pointwise.bias"), Tensor::zeros([1, c_out, 1, 1]))?;
        Ok(DsConv {
            depthwise,
            pointwise,
            bias,
            c_in,
            c_out,
            multiplier,
        })
    }

    /// `9·k·C_in + k·C_in·C_out + C_out`.
    pub fn param_count(c_in: usize, c_out: usize, multiplier: usize) -> usize {
        9 * multiplier * c_in + multiplier * c_in * c_out + c_out
    }

    fn depthwise_spec(&self) -> ConvSpec {
        ConvSpec::depthwise(self.c_in, 3, 1)
    }

    fn check<T>(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != self.c_in {
            return Err(Error::shape(format!(
                "ds_conv expects {} input channels, got {}",
                self.c_in,
                x.c()
            )));
        }
        Ok(())
    }

    pub fn infer<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let mid = conv2d(x, p.get(self.depthwise), None, &self.depthwise_spec())?;
        conv2d(&mid, p.get(self.pointwise), Some(p.get(self.bias).data()), &ConvSpec::pointwise())
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, DsConvCache<T>)> {
        self.check(x)?;
        let mid = conv2d(x, p.get(self.depthwise), None, &self.depthwise_spec())?;
        let y = conv2d(&mid, p.get(self.pointwise), Some(p.get(self.bias).data()), &ConvSpec::pointwise())?;
        Ok((y, DsConvCache { input: x.clone(), mid }))
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &DsConvCache<T>,
        grad_out: &Tensor<T>,
        grads: &mut GradStore<T>,
    ) -> Result<Tensor<T>> {
        let pw = conv2d_backward(&cache.mid, p.get(self.pointwise), &ConvSpec::pointwise(), grad_out)?;
        grads.accumulate(self.pointwise, pw.grad_weight.data());
        grads.accumulate(self.bias, &pw.grad_bias);
        let dw = conv2d_backward(&cache.input, p.get(self.depthwise), &self.depthwise_spec(), &pw.grad_input)?;
        grads.accumulate(self.depthwise, dw.grad_weight.data());
        Ok(dw.grad_input)
    }
}
