use super::params::{GradStore, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer. The affine `gamma`/`beta`
/// live in the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BatchNormState<T>,
    pub name: String,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        let gamma = store.register(format!("{prefix}.gamma"), Tensor::full([1, channels, 1, 1], T::one()))?;
        let beta = store.register(format!("{prefix}.beta"), Tensor::zeros([1, channels, 1, 1]))?;
        Ok(BatchNorm {
            gamma,
            beta,
            state: BatchNormState::new(channels),
            name: prefix.to_string(),
        })
    }

    pub fn channels(&self) -> usize {
        self.state.running_mean.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.c() != self.channels() {
            return Err(Error::shape(format!(
                "{}: expects {} channels, got {}",
                self.name,
                self.channels(),
                x.c()
            )));
        }
        Ok(())
    }

    /// Normalizes with running statistics; no state change.
    pub fn infer(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let gamma = p.get(self.gamma).data();
        let beta = p.get(self.beta).data();
        let mut out = x.clone();
        let [n, c, _, _] = x.dims();
        for ch in 0..c {
            let inv = T::one() / (self.state.running_var[ch] + self.state.eps).sqrt();
            let (mean, g, b) = (self.state.running_mean[ch], gamma[ch], beta[ch]);
            for s in 0..n {
                out.plane_mut(s, ch)
                    .iter_mut()
                    .for_each(|v| *v = g * ((*v - mean) * inv) + b);
            }
        }
        Ok(out)
    }

    /// Normalizes with batch statistics over (N, H, W) and updates the running stats.
    pub fn forward(&mut self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        self.check(x)?;
        let [n, c, h, w] = x.dims();
        let m = n * h * w;
        if m <= 1 {
            return Err(Error::DegenerateBatch(format!(
                "{}: train-mode batch norm over N*H*W = {m} values",
                self.name
            )));
        }
        let mf = T::lit(m as f64);
        let gamma = p.get(self.gamma).data();
        let beta = p.get(self.beta).data();
        let mut xhat = Tensor::zeros(x.dims());
        let mut out = Tensor::zeros(x.dims());
        let mut inv_std = Vec::with_capacity(c);
        let momentum = self.state.momentum;
        for ch in 0..c {
            let mut sum = T::zero();
            for s in 0..n {
                sum += x.plane(s, ch).iter().copied().sum();
            }
            let mean = sum / mf;
            let mut sq = T::zero();
            for s in 0..n {
                sq += x.plane(s, ch).iter().map(|&v| (v - mean) * (v - mean)).sum();
            }
            let var = sq / mf;
            let inv = T::one() / (var + self.state.eps).sqrt();
            inv_std.push(inv);
            for s in 0..n {
                let src = x.plane(s, ch);
                let dst = xhat.plane_mut(s, ch);
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = (v - mean) * inv;
                }
                let (g, b) = (gamma[ch], beta[ch]);
                let xh = xhat.plane(s, ch).to_vec();
                for (o, v) in out.plane_mut(s, ch).iter_mut().zip(xh) {
                    *o = g * v + b;
                }
            }
            let unbiased = var * mf / T::lit((m - 1) as f64);
            let rm = &mut self.state.running_mean[ch];
            *rm = (T::one() - momentum) * *rm + momentum * mean;
            let rv = &mut self.state.running_var[ch];
            *rv = (T::one() - momentum) * *rv + momentum * unbiased;
        }
        Ok((out, BatchNormCache { xhat, inv_std }))
    }

    pub fn backward(
        &self,
        p: &ParamStore<T>,
        cache: &BatchNormCache<T>,
        grad_out: &Tensor<T>,
        grads: &mut GradStore<T>,
    ) -> Result<Tensor<T>> {
        if grad_out.dims() != cache.xhat.dims() {
            return Err(Error::shape(format!("{}: grad dims mismatch", self.name)));
        }
        let [n, c, h, w] = grad_out.dims();
        let mf = T::lit((n * h * w) as f64);
        let gamma = p.get(self.gamma).data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut gx = Tensor::zeros(grad_out.dims());
        for ch in 0..c {
            let (mut sg, mut sgx) = (T::zero(), T::zero());
            for s in 0..n {
                let g = grad_out.plane(s, ch);
                let xh = cache.xhat.plane(s, ch);
                sg += g.iter().copied().sum();
                sgx += g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            }
            dbeta[ch] = sg;
            dgamma[ch] = sgx;
            let k = gamma[ch] * cache.inv_std[ch] / mf;
            for s in 0..n {
                let g = grad_out.plane(s, ch).to_vec();
                let xh = cache.xhat.plane(s, ch).to_vec();
                for ((d, gv), xv) in gx.plane_mut(s, ch).iter_mut().zip(g).zip(xh) {
                    *d = k * (mf * gv - sg - xv * sgx);
                }
            }
        }
        grads.accumulate(self.gamma, &dgamma);
        grads.accumulate(self.beta, &dbeta);
        Ok(gx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn layer(c: usize) -> (ParamStore<f64>, BatchNorm<f64>) {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", c).unwrap();
        (store, bn)
    }

    #[test]
    fn eval_identity_normalization() {
        let (store, bn) = layer(3);
        let x = Tensor::new([2, 3, 4, 4], Fill::Normal(1.0), 1).unwrap();
        let y = bn.infer(&store, &x).unwrap();
        let k = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a * k - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_input_gives_beta() {
        let (mut store, mut bn) = layer(2);
        *store.get_mut(bn.beta) = Tensor::vector(vec![0.25, -1.5]);
        let x = Tensor::full([3, 2, 2, 2], 4.0);
        let (y, _) = bn.forward(&store, &x).unwrap();
        for s in 0..3 {
            assert!(y.plane(s, 0).iter().all(|&v| v == 0.25));
            assert!(y.plane(s, 1).iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn degenerate_batch_rejected() {
        let (store, mut bn) = layer(2);
        let x = Tensor::zeros([1, 2, 1, 1]);
        assert!(matches!(bn.forward(&store, &x), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn train_output_is_standardized() {
        let (store, mut bn) = layer(4);
        let x = Tensor::new([4, 4, 5, 5], Fill::Normal(3.0), 8).unwrap().map(|v| v + 2.0);
        let (y, _) = bn.forward(&store, &x).unwrap();
        for ch in 0..4 {
            let vals: Vec<f64> = (0..4).flat_map(|s| y.plane(s, ch).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let (store, mut bn) = layer(1);
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        bn.forward(&store, &x).unwrap();
        // batch mean 2, unbiased var 2
        assert!((bn.state.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((bn.state.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }
}
