use super::params::{GradStore, Initializer, ParamId, ParamStore};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{conv2d, conv2d_backward, ConvSpec, Tensor};

/// Plain biased convolution with one group.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv2dLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        let weight = store.register(
            format!("{prefix}.weight"),
            init.he_uniform([c_out, c_in, kernel, kernel], c_in * kernel * kernel),
        )?;
        let bias = store.register(format!("{prefix}.bias"), Tensor::zeros([1, c_out, 1, 1]))?;
        Ok(Conv2dLayer {
            weight,
            bias,
            spec: ConvSpec::square(kernel, kernel / 2),
        })
    }

    pub fn param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
        c_out * c_in * kernel * kernel + c_out
    }

    pub fn infer<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, p.get(self.weight), Some(p.get(self.bias).data()), &self.spec)
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: &mut GradStore<T>,
    ) -> Result<Tensor<T>> {
        let g = conv2d_backward(input, p.get(self.weight), &self.spec, grad_out)?;
        grads.accumulate(self.weight, g.grad_weight.data());
        grads.accumulate(self.bias, &g.grad_bias);
        Ok(g.grad_input)
    }
}
