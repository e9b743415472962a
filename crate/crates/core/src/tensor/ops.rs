use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of relu given the forward input (or output; both share the sign test).
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    same_dims(x, grad)?;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(x.dims(), data))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Gradient of sigmoid expressed through its output `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    same_dims(y, grad)?;
    let data = y
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Ok(Tensor::from_parts(y.dims(), data))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, b, |x, y| x + y)
}

/// Elementwise product. The backward pair is `(mul(g, b), mul(g, a))`.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, k: T) -> Tensor<T> {
    a.map(|v| v * k)
}

/// Adds a per-channel value. `v` has length C (shared by all samples) or N·C.
pub fn add_channel<T: Scalar>(x: &Tensor<T>, v: &[T]) -> Result<Tensor<T>> {
    channel_broadcast(x, v, |a, b| a + b)
}

/// Scales each channel. `v` has length C (shared by all samples) or N·C.
pub fn mul_channel<T: Scalar>(x: &Tensor<T>, v: &[T]) -> Result<Tensor<T>> {
    channel_broadcast(x, v, |a, b| a * b)
}

fn channel_broadcast<T: Scalar>(x: &Tensor<T>, v: &[T], f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let [n, c, _, _] = x.dims();
    let per_sample = if v.len() == c {
        false
    } else if v.len() == n * c {
        true
    } else {
        return Err(Error::shape(format!(
            "channel vector of length {} does not broadcast against {:?}",
            v.len(),
            x.dims()
        )));
    };
    let plane = x.plane_len();
    let mut out = Vec::with_capacity(x.len());
    for s in 0..n {
        for ch in 0..c {
            let k = if per_sample { v[s * c + ch] } else { v[ch] };
            out.extend(x.plane(s, ch).iter().map(|&a| f(a, k)));
        }
    }
    debug_assert_eq!(out.len(), n * c * plane);
    Ok(Tensor::from_parts(x.dims(), out))
}

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    same_dims(a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.dims(), data))
}

fn same_dims<T>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "operand dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}
