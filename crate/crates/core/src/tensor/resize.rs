//! Bilinear resampling with half-pixel centers.
//!
//! For an axis of input length `in` and output length `out`, output index `d`
//! samples the source coordinate
//!
//! ```text
//! s = clamp((d + 0.5) * in / out - 0.5, 0, in - 1)
//! i0 = floor(s), i1 = min(i0 + 1, in - 1), f = s - i0
//! ```
//!
//! and the value is `lerp(lerp(a, b, fx), lerp(c, d, fx), fy)` over the four
//! neighbours, where `lerp(p, q, f) = p + f * (q - p)` clamped to `[min(p,q), max(p,q)]`.
//! Coordinates and fractions are computed in `f64` and rounded once.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
}

fn taps<T: Scalar>(len_in: usize, len_out: usize) -> Vec<Tap<T>> {
    let ratio = len_in as f64 / len_out as f64;
    let max = (len_in - 1) as f64;
    (0..len_out)
        .map(|d| {
            let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, max);
            let i0 = s.floor() as usize;
            Tap {
                i0,
                i1: (i0 + 1).min(len_in - 1),
                frac: T::lit(s - i0 as f64),
            }
        })
        .collect()
}

#[inline]
fn lerp<T: Scalar>(p: T, q: T, f: T) -> T {
    (p + f * (q - p)).max(p.min(q)).min(p.max(q))
}

pub fn bilinear_resize<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims();
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize output dims must be >= 1"));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("bilinear_resize of an empty plane"));
    }
    let ty = taps::<T>(h, out_h);
    let tx = taps::<T>(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for s in 0..n {
        for ch in 0..c {
            let plane = input.plane(s, ch);
            for y in &ty {
                let r0 = &plane[y.i0 * w..(y.i0 + 1) * w];
                let r1 = &plane[y.i1 * w..(y.i1 + 1) * w];
                for x in &tx {
                    let top = lerp(r0[x.i0], r0[x.i1], x.frac);
                    let bot = lerp(r1[x.i0], r1[x.i1], x.frac);
                    out.push(lerp(top, bot, y.frac));
                }
            }
        }
    }
    Ok(Tensor::from_parts([n, c, out_h, out_w], out))
}

/// Adjoint of [`bilinear_resize`]: scatters each output gradient onto its
/// four source pixels with the interpolation weights.
pub fn bilinear_resize_backward<T: Scalar>(input_dims: [usize; 4], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_dims;
    let [gn, gc, out_h, out_w] = grad_out.dims();
    if gn != n || gc != c {
        return Err(Error::shape(format!(
            "resize grad dims {:?} incompatible with input {input_dims:?}",
            grad_out.dims()
        )));
    }
    let ty = taps::<T>(h, out_h);
    let tx = taps::<T>(w, out_w);
    let mut grad = Tensor::zeros(input_dims);
    for s in 0..n {
        for ch in 0..c {
            let gplane = grad_out.plane(s, ch);
            let dst = grad.plane_mut(s, ch);
            for (oy, y) in ty.iter().enumerate() {
                let (wy0, wy1) = (T::one() - y.frac, y.frac);
                for (ox, x) in tx.iter().enumerate() {
                    let g = gplane[oy * out_w + ox];
                    let (wx0, wx1) = (T::one() - x.frac, x.frac);
                    dst[y.i0 * w + x.i0] += g * wy0 * wx0;
                    dst[y.i0 * w + x.i1] += g * wy0 * wx1;
                    dst[y.i1 * w + x.i0] += g * wy1 * wx0;
                    dst[y.i1 * w + x.i1] += g * wy1 * wx1;
                }
            }
        }
    }
    Ok(grad)
}
