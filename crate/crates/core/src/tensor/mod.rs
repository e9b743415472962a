//! Dense NCHW tensors and the raw numerical kernels built on them.
//!
//! Every forward kernel has an analytic backward counterpart. Kernels never
//! mutate their inputs; parallel paths split work per sample and reduce in
//! sample order, so results are identical to a serial run.

mod conv;
mod layout;
mod ops;
mod pool;
mod resize;

pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvSpec};
pub use layout::{concat_channels, crop_back, pad_reflect_to, pad_reflect_backward, split_channels, PadInfo};
pub use ops::{
    add, add_channel, mul, mul_channel, relu, relu_backward, scale, sigmoid, sigmoid_backward,
    sigmoid_scalar,
};
pub use pool::{max_pool2, max_pool2_backward, PoolIndices};
pub use resize::{bilinear_resize, bilinear_resize_backward};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Value distribution for [`Tensor::new`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Const(f64),
    /// Uniform on `[-a, a)`.
    Uniform(f64),
    /// Normal with mean 0 and the given standard deviation.
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

pub(crate) fn checked_len(dims: [usize; 4]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n.checked_mul(std::mem::size_of::<f64>()).is_some())
        .ok_or_else(|| Error::Size(format!("dims {dims:?} overflow addressable memory")))
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor filled with a constant or seeded random values.
    pub fn new(dims: [usize; 4], fill: Fill, seed: u64) -> Result<Self> {
        let len = checked_len(dims)?;
        let data = match fill {
            Fill::Const(v) => vec![T::lit(v); len],
            Fill::Uniform(a) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                if a <= 0.0 {
                    vec![T::zero(); len]
                } else {
                    let dist = Uniform::new(-a, a).map_err(|e| Error::config(e.to_string()))?;
                    (0..len).map(|_| T::lit(dist.sample(&mut rng))).collect()
                }
            }
            Fill::Normal(sigma) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
                (0..len).map(|_| T::lit(dist.sample(&mut rng))).collect()
            }
        };
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: [usize; 4], value: T) -> Self {
        let len = checked_len(dims).expect("tensor dims overflow");
        Tensor {
            dims,
            data: vec![value; len],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len = checked_len(dims)?;
        if data.len() != len {
            return Err(Error::shape(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    /// Per-channel vector stored as a `(1, C, 1, 1)` tensor.
    pub fn vector(values: Vec<T>) -> Self {
        Tensor {
            dims: [1, values.len(), 1, 1],
            data: values,
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .map(|&v| U::lit(v.to_f64_lossless()))
                .collect(),
        }
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn min_max(&self) -> Option<(T, T)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks single-sample tensors along N.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.dims[1..] != [c, h, w] {
                return Err(Error::shape(format!(
                    "stack mismatch: {:?} vs {:?}",
                    p.dims, first.dims
                )));
            }
            n += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec([n, c, h, w], data)
    }

    /// Copies sample `n` out as a `(1, C, H, W)` tensor.
    pub fn sample_tensor(&self, n: usize) -> Self {
        let [_, c, h, w] = self.dims;
        Tensor {
            dims: [1, c, h, w],
            data: self.sample(n).to_vec(),
        }
    }
}

impl<T> Tensor<T> {
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane_len();
        let start = (n * self.dims[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane_len();
        let start = (n * self.dims[1] + c) * p;
        &mut self.data[start..start + p]
    }

    #[inline]
    fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    pub(crate) fn from_parts(dims: [usize; 4], data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }
}
