use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Winning position inside each 2×2 window, row-major (0..=3).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_dims: [usize; 4],
    pub argmax: Vec<u8>,
}

/// 2×2 max pooling with stride 2. Ties resolve to the lowest window index.
pub fn max_pool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let [n, c, h, w] = input.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("max_pool2 needs even H and W, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for s in 0..n {
        for ch in 0..c {
            let plane = input.plane(s, ch);
            for oy in 0..ho {
                let r0 = &plane[2 * oy * w..(2 * oy + 1) * w];
                let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
                for ox in 0..wo {
                    let window = [r0[2 * ox], r0[2 * ox + 1], r1[2 * ox], r1[2 * ox + 1]];
                    let mut best = 0u8;
                    for k in 1..4u8 {
                        if window[k as usize] > window[best as usize] {
                            best = k;
                        }
                    }
                    out.push(window[best as usize]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((
        Tensor::from_parts([n, c, ho, wo], out),
        PoolIndices {
            input_dims: input.dims(),
            argmax,
        },
    ))
}

/// Routes each output gradient to the input position that won its window.
pub fn max_pool2_backward<T: Scalar>(idx: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = idx.input_dims;
    if grad_out.dims() != [n, c, h / 2, w / 2] {
        return Err(Error::shape(format!(
            "pool grad dims {:?} do not match input {:?}",
            grad_out.dims(),
            idx.input_dims
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut grad = Tensor::zeros(idx.input_dims);
    for s in 0..n {
        for ch in 0..c {
            let gplane = grad_out.plane(s, ch);
            let base = (s * c + ch) * ho * wo;
            let dst = grad.plane_mut(s, ch);
            for oy in 0..ho {
                for ox in 0..wo {
                    let k = idx.argmax[base + oy * wo + ox] as usize;
                    let (dy, dx) = (k / 2, k % 2);
                    dst[(2 * oy + dy) * w + 2 * ox + dx] += gplane[oy * wo + ox];
                }
            }
        }
    }
    Ok(grad)
}
