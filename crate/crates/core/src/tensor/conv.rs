//! Direct 2-D cross-correlation (no kernel flip) with zero padding and groups.
//!
//! Each output element is accumulated as `bias + Σ_ci Σ_ky Σ_kx w·x`, input
//! channels outermost, then kernel rows, then kernel columns. The pointwise
//! fast path keeps the same order, so every route produces identical bits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, one group.
    pub fn square(kernel: usize, padding: usize) -> Self {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding,
            groups: 1,
        }
    }

    pub fn pointwise() -> Self {
        Self::square(1, 0)
    }

    /// Per-channel spatial convolution over `channels` groups.
    pub fn depthwise(channels: usize, kernel: usize, padding: usize) -> Self {
        ConvSpec {
            groups: channels,
            ..Self::square(kernel, padding)
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |len: usize, k: usize| -> Result<usize> {
            let span = len + 2 * self.padding;
            if span < k {
                return Err(Error::shape(format!(
                    "kernel {k} larger than padded extent {span}"
                )));
            }
            if (span - k) % self.stride != 0 {
                return Err(Error::shape(format!(
                    "non-integral output size: ({span} - {k}) / {}",
                    self.stride
                )));
            }
            Ok((span - k) / self.stride + 1)
        };
        Ok((axis(h, self.kernel_h)?, axis(w, self.kernel_w)?))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0 && self.groups == 1
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 || self.groups == 0 {
            return Err(Error::shape(format!("invalid conv spec {self:?}")));
        }
        Ok(())
    }
}

struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    cin_g: usize,
    cout_g: usize,
    ho: usize,
    wo: usize,
}

fn geometry<T>(input: &Tensor<T>, weight: &Tensor<T>, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let [n, c_in, h, w] = input.dims();
    let [c_out, cin_g, kh, kw] = weight.dims();
    if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
        return Err(Error::shape(format!(
            "groups {} must divide in-channels {c_in} and out-channels {c_out}",
            spec.groups
        )));
    }
    if cin_g * spec.groups != c_in {
        return Err(Error::shape(format!(
            "weight expects {} input channels per group, input has {c_in} over {} groups",
            cin_g, spec.groups
        )));
    }
    if kh != spec.kernel_h || kw != spec.kernel_w {
        return Err(Error::shape(format!(
            "weight kernel {kh}x{kw} does not match spec {}x{}",
            spec.kernel_h, spec.kernel_w
        )));
    }
    let (ho, wo) = spec.output_hw(h, w)?;
    Ok(Geometry {
        n,
        c_in,
        h,
        w,
        c_out,
        cin_g,
        cout_g: c_out / spec.groups,
        ho,
        wo,
    })
}

/// Range of output columns whose tap `k` lands inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < len
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if len + pad <= k {
        return (0, 0);
    }
    let hi = ((len + pad - k - 1) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = geometry(input, weight, spec)?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(Error::shape(format!(
                "bias length {} != out-channels {}",
                b.len(),
                g.c_out
            )));
        }
    }
    let out_sample = g.c_out * g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * out_sample];
    if out_sample == 0 {
        return Ok(Tensor::from_parts([g.n, g.c_out, g.ho, g.wo], out));
    }
    let in_sample = g.c_in * g.h * g.w;
    let wdata = weight.data();
    out.par_chunks_mut(out_sample)
        .enumerate()
        .for_each(|(s, dst)| {
            let src = &input.data()[s * in_sample..(s + 1) * in_sample];
            if spec.is_pointwise() {
                pointwise(src, wdata, bias, dst, g.c_in, g.c_out, g.h * g.w);
            } else {
                direct_sample(src, wdata, bias, dst, &g, spec);
            }
        });
    Ok(Tensor::from_parts([g.n, g.c_out, g.ho, g.wo], out))
}

fn direct_sample<T: Scalar>(
    src: &[T],
    wdata: &[T],
    bias: Option<&[T]>,
    dst: &mut [T],
    g: &Geometry,
    spec: &ConvSpec,
) {
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let plane_out = g.ho * g.wo;
    let plane_in = g.h * g.w;
    for co in 0..g.c_out {
        let grp = co / g.cout_g;
        let oplane = &mut dst[co * plane_out..(co + 1) * plane_out];
        let b = bias.map_or(T::zero(), |b| b[co]);
        oplane.iter_mut().for_each(|v| *v = b);
        for cig in 0..g.cin_g {
            let ci = grp * g.cin_g + cig;
            let iplane = &src[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(g.ho, g.h, ky, s, p);
                for kx in 0..kw {
                    let wv = wdata[((co * g.cin_g + cig) * kh + ky) * kw + kx];
                    let (ox0, ox1) = valid_range(g.wo, g.w, kx, s, p);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let orow = &mut oplane[oy * g.wo..(oy + 1) * g.wo];
                        let irow = &iplane[iy * g.w..(iy + 1) * g.w];
                        if s == 1 {
                            let ix0 = ox0 + kx - p;
                            let len = ox1 - ox0;
                            for (o, &x) in orow[ox0..ox1].iter_mut().zip(&irow[ix0..ix0 + len]) {
                                *o += wv * x;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * irow[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

const TILE_CO: usize = 4;
const TILE_P: usize = 16;

/// `dst[co, p] = bias[co] + Σ_ci w[co, ci] · src[ci, p]`, summed in ascending `ci`.
fn pointwise<T: Scalar>(
    src: &[T],
    w: &[T],
    bias: Option<&[T]>,
    dst: &mut [T],
    c_in: usize,
    c_out: usize,
    plane: usize,
) {
    let mut co0 = 0;
    while co0 < c_out {
        let nco = TILE_CO.min(c_out - co0);
        let mut p0 = 0;
        while p0 < plane {
            let np = TILE_P.min(plane - p0);
            let mut acc = [[T::zero(); TILE_P]; TILE_CO];
            for (j, row) in acc.iter_mut().enumerate().take(nco) {
                let b = bias.map_or(T::zero(), |b| b[co0 + j]);
                row.iter_mut().for_each(|v| *v = b);
            }
            if nco == TILE_CO && np == TILE_P {
                for ci in 0..c_in {
                    let x: &[T; TILE_P] = src[ci * plane + p0..ci * plane + p0 + TILE_P]
                        .try_into()
                        .expect("tile");
                    for (j, row) in acc.iter_mut().enumerate() {
                        let wv = w[(co0 + j) * c_in + ci];
                        for q in 0..TILE_P {
                            row[q] += wv * x[q];
                        }
                    }
                }
            } else {
                for ci in 0..c_in {
                    let x = &src[ci * plane + p0..ci * plane + p0 + np];
                    for (j, row) in acc.iter_mut().enumerate().take(nco) {
                        let wv = w[(co0 + j) * c_in + ci];
                        for q in 0..np {
                            row[q] += wv * x[q];
                        }
                    }
                }
            }
            for (j, row) in acc.iter().enumerate().take(nco) {
                let base = (co0 + j) * plane + p0;
                dst[base..base + np].copy_from_slice(&row[..np]);
            }
            p0 += np;
        }
        co0 += nco;
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub grad_input: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Vec<T>,
}

/// Analytic gradients of [`conv2d`] with respect to input, weight and bias.
///
/// Weight and bias gradients are reduced per sample first, then summed over
/// samples in index order.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = geometry(input, weight, spec)?;
    if grad_out.dims() != [g.n, g.c_out, g.ho, g.wo] {
        return Err(Error::shape(format!(
            "grad_out dims {:?} != conv output dims {:?}",
            grad_out.dims(),
            [g.n, g.c_out, g.ho, g.wo]
        )));
    }
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * g.ho * g.wo;
    let wlen = weight.len();

    let mut grad_input = vec![T::zero(); input.len()];
    if in_sample > 0 {
        let wt = if spec.is_pointwise() {
            Some(transpose(weight.data(), g.c_out, g.c_in))
        } else {
            None
        };
        grad_input
            .par_chunks_mut(in_sample)
            .enumerate()
            .for_each(|(s, dst)| {
                let go = &grad_out.data()[s * out_sample..(s + 1) * out_sample];
                match &wt {
                    Some(wt) => pointwise(go, wt, None, dst, g.c_out, g.c_in, g.h * g.w),
                    None => input_grad_sample(go, weight.data(), dst, &g, spec),
                }
            });
    }

    let partials: Vec<(Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|s| {
            let x = &input.data()[s * in_sample..(s + 1) * in_sample];
            let go = &grad_out.data()[s * out_sample..(s + 1) * out_sample];
            let mut gw = vec![T::zero(); wlen];
            if spec.is_pointwise() {
                pointwise_weight_grad(x, go, &mut gw, g.c_in, g.c_out, g.h * g.w);
            } else {
                weight_grad_sample(x, go, &mut gw, &g, spec);
            }
            let plane = g.ho * g.wo;
            let gb = (0..g.c_out)
                .map(|co| go[co * plane..(co + 1) * plane].iter().copied().sum())
                .collect();
            (gw, gb)
        })
        .collect();

    let mut grad_weight = vec![T::zero(); wlen];
    let mut grad_bias = vec![T::zero(); g.c_out];
    for (gw, gb) in &partials {
        grad_weight.iter_mut().zip(gw).for_each(|(a, &b)| *a += b);
        grad_bias.iter_mut().zip(gb).for_each(|(a, &b)| *a += b);
    }

    Ok(ConvGrads {
        grad_input: Tensor::from_parts(input.dims(), grad_input),
        grad_weight: Tensor::from_parts(weight.dims(), grad_weight),
        grad_bias,
    })
}

fn transpose<T: Scalar>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

fn input_grad_sample<T: Scalar>(go: &[T], wdata: &[T], dst: &mut [T], g: &Geometry, spec: &ConvSpec) {
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let plane_out = g.ho * g.wo;
    let plane_in = g.h * g.w;
    for co in 0..g.c_out {
        let grp = co / g.cout_g;
        let gplane = &go[co * plane_out..(co + 1) * plane_out];
        for cig in 0..g.cin_g {
            let ci = grp * g.cin_g + cig;
            let iplane = &mut dst[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(g.ho, g.h, ky, s, p);
                for kx in 0..kw {
                    let wv = wdata[((co * g.cin_g + cig) * kh + ky) * kw + kx];
                    let (ox0, ox1) = valid_range(g.wo, g.w, kx, s, p);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let grow = &gplane[oy * g.wo..(oy + 1) * g.wo];
                        let irow = &mut iplane[iy * g.w..(iy + 1) * g.w];
                        if s == 1 {
                            let ix0 = ox0 + kx - p;
                            let len = ox1 - ox0;
                            for (i, &gv) in irow[ix0..ix0 + len].iter_mut().zip(&grow[ox0..ox1]) {
                                *i += wv * gv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                irow[ox * s + kx - p] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn weight_grad_sample<T: Scalar>(x: &[T], go: &[T], gw: &mut [T], g: &Geometry, spec: &ConvSpec) {
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let plane_out = g.ho * g.wo;
    let plane_in = g.h * g.w;
    for co in 0..g.c_out {
        let grp = co / g.cout_g;
        let gplane = &go[co * plane_out..(co + 1) * plane_out];
        for cig in 0..g.cin_g {
            let ci = grp * g.cin_g + cig;
            let iplane = &x[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(g.ho, g.h, ky, s, p);
                for kx in 0..kw {
                    let (ox0, ox1) = valid_range(g.wo, g.w, kx, s, p);
                    let mut acc = T::zero();
                    if ox0 < ox1 {
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let grow = &gplane[oy * g.wo..(oy + 1) * g.wo];
                            let irow = &iplane[iy * g.w..(iy + 1) * g.w];
                            if s == 1 {
                                let ix0 = ox0 + kx - p;
                                let len = ox1 - ox0;
                                acc += dot(&grow[ox0..ox1], &irow[ix0..ix0 + len]);
                            } else {
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * irow[ox * s + kx - p];
                                }
                            }
                        }
                    }
                    gw[((co * g.cin_g + cig) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
}

fn pointwise_weight_grad<T: Scalar>(
    x: &[T],
    go: &[T],
    gw: &mut [T],
    c_in: usize,
    c_out: usize,
    plane: usize,
) {
    for co in 0..c_out {
        let grow = &go[co * plane..(co + 1) * plane];
        for ci in 0..c_in {
            gw[co * c_in + ci] = dot(grow, &x[ci * plane..(ci + 1) * plane]);
        }
    }
}

/// Dot product with four interleaved partial sums, combined in a fixed order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ca, cb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for q in 0..8 {
            acc[q] += ca[q] * cb[q];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn t(dims: [usize; 4], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(dims, v).unwrap()
    }

    #[test]
    fn ones_under_zero_padding() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, &ConvSpec::square(3, 1)).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::<f32>::new([2, 1, 5, 4], Fill::Normal(1.0), 9).unwrap();
        let mut w = Tensor::<f32>::zeros([1, 1, 3, 3]);
        w.set(0, 0, 1, 1, 1.0);
        let y = conv2d(&x, &w, None, &ConvSpec::square(3, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn scalar_chain_rule() {
        let (x, w, g) = (1.5, -2.0, 0.75);
        let grads = conv2d_backward(
            &t([1, 1, 1, 1], vec![x]),
            &t([1, 1, 1, 1], vec![w]),
            &ConvSpec::pointwise(),
            &t([1, 1, 1, 1], vec![g]),
        )
        .unwrap();
        assert_eq!(grads.grad_input.data(), &[w * g]);
        assert_eq!(grads.grad_weight.data(), &[x * g]);
        assert_eq!(grads.grad_bias, vec![g]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = Tensor::<f64>::new([2, 3, 5, 5], Fill::Normal(1.0), 1).unwrap();
        let w = Tensor::<f64>::new([4, 3, 3, 3], Fill::Normal(1.0), 2).unwrap();
        let spec = ConvSpec::square(3, 1);
        let grads = conv2d_backward(&x, &w, &spec, &Tensor::zeros([2, 4, 5, 5])).unwrap();
        assert!(grads.grad_input.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_weight.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_integral_output_is_shape_error() {
        let x = Tensor::<f32>::zeros([1, 1, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 1, 3, 3]);
        let spec = ConvSpec {
            stride: 2,
            ..ConvSpec::square(3, 0)
        };
        assert!(matches!(conv2d(&x, &w, None, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn groups_must_divide_channels() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros([4, 1, 3, 3]);
        let spec = ConvSpec::depthwise(2, 3, 1);
        assert!(matches!(conv2d(&x, &w, None, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn grad_out_shape_checked() {
        let x = Tensor::<f32>::zeros([1, 1, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 1, 3, 3]);
        let bad = Tensor::<f32>::zeros([1, 1, 3, 3]);
        assert!(conv2d_backward(&x, &w, &ConvSpec::square(3, 1), &bad).is_err());
    }

    #[test]
    fn pointwise_path_matches_direct_path_bitwise() {
        let x = Tensor::<f32>::new([2, 7, 5, 9], Fill::Normal(1.0), 4).unwrap();
        let w = Tensor::<f32>::new([6, 7, 1, 1], Fill::Normal(1.0), 5).unwrap();
        let b: Vec<f32> = (0..6).map(|i| i as f32 * 0.1).collect();
        let fast = conv2d(&x, &w, Some(&b), &ConvSpec::pointwise()).unwrap();
        let g = geometry(&x, &w, &ConvSpec::pointwise()).unwrap();
        let mut slow = vec![0.0f32; fast.len()];
        let per = 6 * 45;
        for s in 0..2 {
            direct_sample(
                x.sample(s),
                w.data(),
                Some(&b),
                &mut slow[s * per..(s + 1) * per],
                &g,
                &ConvSpec::pointwise(),
            );
        }
        assert_eq!(fast.data(), &slow[..]);
    }

    #[test]
    fn strided_output_size() {
        let x = Tensor::<f32>::zeros([1, 1, 7, 7]);
        let w = Tensor::<f32>::zeros([2, 1, 3, 3]);
        let spec = ConvSpec {
            stride: 2,
            ..ConvSpec::square(3, 1)
        };
        assert_eq!(conv2d(&x, &w, None, &spec).unwrap().dims(), [1, 2, 4, 4]);
    }
}
