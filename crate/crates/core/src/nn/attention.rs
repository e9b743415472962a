//! Convolutional block attention: channel gating followed by spatial gating.
//!
//! Channel: `s = σ(W2·relu(W1·avg(F)) + W2·relu(W1·max(F)))`, pooled over H×W
//! per sample and channel, output `F · s`.
//! Spatial: `m = σ(conv7×7([mean_c F; max_c F]))`, output `F · m`.

use super::params::{GradStore, Initializer, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv2d, conv2d_backward, sigmoid_scalar, ConvSpec, Tensor};

#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: ParamId,
    pub fc2: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct ChannelAttentionCache<T> {
    input: Tensor<T>,
    avg: Vec<T>,
    max: Vec<T>,
    argmax: Vec<usize>,
    h_avg: Vec<T>,
    h_max: Vec<T>,
    scale: Vec<T>,
}

/// `y[j] = Σ_i m[j, i] x[i]` for a row-major `rows × cols` matrix.
fn matvec<T: Scalar>(m: &[T], x: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(&a, &b)| a * b).sum())
        .collect()
}

fn matvec_t<T: Scalar>(m: &[T], y: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += m[r * cols + c] * y[r];
        }
    }
    out
}

impl ChannelAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 || channels / reduction == 0 {
            return Err(Error::config(format!(
                "{prefix}: reduction {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        let fc1 = store.register(format!("{prefix}.fc1.weight"), init.he_uniform([hidden, channels, 1, 1], channels))?;
        let fc2 = store.register(format!("{prefix}.fc2.weight"), init.he_uniform([channels, hidden, 1, 1], hidden))?;
        Ok(ChannelAttention {
            fc1,
            fc2,
            channels,
            hidden,
        })
    }

    pub fn param_count(channels: usize, reduction: usize) -> usize {
        2 * channels * (channels / reduction)
    }

    /// Per-(sample, channel) gates in (0, 1), length N·C.
    pub fn gates<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.compute(p, x)?.scale)
    }

    fn compute<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<ChannelAttentionCache<T>> {
        let [n, c, h, w] = x.dims();
        if c != self.channels {
            return Err(Error::shape(format!(
                "channel attention expects {} channels, got {c}",
                self.channels
            )));
        }
        if h * w == 0 {
            return Err(Error::shape("channel attention over an empty plane"));
        }
        let hw = T::lit((h * w) as f64);
        let (w1, w2) = (p.get(self.fc1).data(), p.get(self.fc2).data());
        let mut avg = Vec::with_capacity(n * c);
        let mut max = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for s in 0..n {
            for ch in 0..c {
                let plane = x.plane(s, ch);
                avg.push(plane.iter().copied().sum::<T>() / hw);
                let (mut bi, mut bv) = (0, plane[0]);
                for (i, &v) in plane.iter().enumerate().skip(1) {
                    if v > bv {
                        bi = i;
                        bv = v;
                    }
                }
                max.push(bv);
                argmax.push(bi);
            }
        }
        let hid = self.hidden;
        let mut h_avg = Vec::with_capacity(n * hid);
        let mut h_max = Vec::with_capacity(n * hid);
        let mut scale = Vec::with_capacity(n * c);
        for s in 0..n {
            let ha: Vec<T> = matvec(w1, &avg[s * c..(s + 1) * c], hid, c)
                .into_iter()
                .map(|v| v.max(T::zero()))
                .collect();
            let hm: Vec<T> = matvec(w1, &max[s * c..(s + 1) * c], hid, c)
                .into_iter()
                .map(|v| v.max(T::zero()))
                .collect();
            let oa = matvec(w2, &ha, c, hid);
            let om = matvec(w2, &hm, c, hid);
            scale.extend(oa.iter().zip(&om).map(|(&a, &b)| sigmoid_scalar(a + b)));
            h_avg.extend(ha);
            h_max.extend(hm);
        }
        Ok(ChannelAttentionCache {
            input: x.clone(),
            avg,
            max,
            argmax,
            h_avg,
            h_max,
            scale,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, ChannelAttentionCache<T>)> {
        let cache = self.compute(p, x)?;
        let y = crate::tensor::mul_channel(x, &cache.scale)?;
        Ok((y, cache))
    }

    pub fn infer<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(p, x)?.0)
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &ChannelAttentionCache<T>,
        grad_out: &Tensor<T>,
        grads: &mut GradStore<T>,
    ) -> Result<Tensor<T>> {
        let x = &cache.input;
        if grad_out.dims() != x.dims() {
            return Err(Error::shape("channel attention grad dims mismatch"));
        }
        let [n, c, h, w] = x.dims();
        let hid = self.hidden;
        let hw = T::lit((h * w) as f64);
        let (w1, w2) = (p.get(self.fc1).data(), p.get(self.fc2).data());
        let mut gx = crate::tensor::mul_channel(grad_out, &cache.scale)?;
        let mut gw1 = vec![T::zero(); hid * c];
        let mut gw2 = vec![T::zero(); c * hid];
        for s in 0..n {
            // gradient w.r.t. the pre-sigmoid logit z = o_avg + o_max
            let gz: Vec<T> = (0..c)
                .map(|ch| {
                    let gs: T = grad_out
                        .plane(s, ch)
                        .iter()
                        .zip(x.plane(s, ch))
                        .map(|(&g, &v)| g * v)
                        .sum();
                    let sv = cache.scale[s * c + ch];
                    gs * sv * (T::one() - sv)
                })
                .collect();
            let pooled = [
                (&cache.h_avg[s * hid..(s + 1) * hid], &cache.avg[s * c..(s + 1) * c]),
                (&cache.h_max[s * hid..(s + 1) * hid], &cache.max[s * c..(s + 1) * c]),
            ];
            let mut gpooled = Vec::with_capacity(2);
            for (hidden, input) in pooled {
                for ch in 0..c {
                    for j in 0..hid {
                        gw2[ch * hid + j] += gz[ch] * hidden[j];
                    }
                }
                let gh: Vec<T> = matvec_t(w2, &gz, c, hid)
                    .into_iter()
                    .zip(hidden)
                    .map(|(g, &hv)| if hv > T::zero() { g } else { T::zero() })
                    .collect();
                for j in 0..hid {
                    for ch in 0..c {
                        gw1[j * c + ch] += gh[j] * input[ch];
                    }
                }
                gpooled.push(matvec_t(w1, &gh, hid, c));
            }
            for ch in 0..c {
                let ga = gpooled[0][ch] / hw;
                let gm = gpooled[1][ch];
                let plane = gx.plane_mut(s, ch);
                plane.iter_mut().for_each(|v| *v += ga);
                plane[cache.argmax[s * c + ch]] += gm;
            }
        }
        grads.accumulate(self.fc1, &gw1);
        grads.accumulate(self.fc2, &gw2);
        Ok(gx)
    }
}

#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

#[derive(Clone, Debug)]
pub struct SpatialAttentionCache<T> {
    input: Tensor<T>,
    features: Tensor<T>,
    argmax: Vec<usize>,
    gate: Vec<T>,
}

impl SpatialAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Initializer, prefix: &str, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::config(format!("{prefix}: spatial kernel must be odd, got {kernel}")));
        }
        let weight = store.register(
            format!("{prefix}.conv.weight"),
            init.he_uniform([1, 2, kernel, kernel], 2 * kernel * kernel),
        )?;
        let bias = store.register(format!("{prefix}.conv.bias"), Tensor::zeros([1, 1, 1, 1]))?;
        Ok(SpatialAttention { weight, bias, kernel })
    }

    pub fn param_count(kernel: usize) -> usize {
        2 * kernel * kernel + 1
    }

    fn spec(&self) -> ConvSpec {
        ConvSpec::square(self.kernel, self.kernel / 2)
    }

    /// Per-(sample, position) gates in (0, 1), shaped (N, 1, H, W).
    pub fn gates<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.compute(p, x)?;
        let [n, _, h, w] = x.dims();
        Tensor::from_vec([n, 1, h, w], cache.gate)
    }

    fn compute<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<SpatialAttentionCache<T>> {
        let [n, c, h, w] = x.dims();
        if c == 0 {
            return Err(Error::shape("spatial attention over zero channels"));
        }
        let plane = h * w;
        let cf = T::lit(c as f64);
        let mut feats = Vec::with_capacity(n * 2 * plane);
        let mut argmax = Vec::with_capacity(n * plane);
        for s in 0..n {
            let mut mean = x.plane(s, 0).to_vec();
            let mut mx = x.plane(s, 0).to_vec();
            let mut am = vec![0usize; plane];
            for ch in 1..c {
                for (i, &v) in x.plane(s, ch).iter().enumerate() {
                    mean[i] += v;
                    if v > mx[i] {
                        mx[i] = v;
                        am[i] = ch;
                    }
                }
            }
            mean.iter_mut().for_each(|v| *v /= cf);
            feats.extend(mean);
            feats.extend(mx);
            argmax.extend(am);
        }
        let features = Tensor::from_vec([n, 2, h, w], feats)?;
        let z = conv2d(&features, p.get(self.weight), Some(p.get(self.bias).data()), &self.spec())?;
        let gate = z.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        Ok(SpatialAttentionCache {
            input: x.clone(),
            features,
            argmax,
            gate,
        })
    }

    fn apply<T: Scalar>(x: &Tensor<T>, gate: &[T]) -> Tensor<T> {
        let [n, c, _, _] = x.dims();
        let plane = x.plane_len();
        let mut out = Vec::with_capacity(x.len());
        for s in 0..n {
            let g = &gate[s * plane..(s + 1) * plane];
            for ch in 0..c {
                out.extend(x.plane(s, ch).iter().zip(g).map(|(&v, &m)| v * m));
            }
        }
        Tensor::from_parts(x.dims(), out)
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, SpatialAttentionCache<T>)> {
        let cache = self.compute(p, x)?;
        Ok((Self::apply(x, &cache.gate), cache))
    }

    pub fn infer<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(p, x)?.0)
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &SpatialAttentionCache<T>,
        grad_out: &Tensor<T>,
        grads: &mut GradStore<T>,
    ) -> Result<Tensor<T>> {
        let x = &cache.input;
        if grad_out.dims() != x.dims() {
            return Err(Error::shape("spatial attention grad dims mismatch"));
        }
        let [n, c, h, w] = x.dims();
        let plane = h * w;
        let cf = T::lit(c as f64);
        let mut gx = Self::apply(grad_out, &cache.gate);
        let mut gz = vec![T::zero(); n * plane];
        for s in 0..n {
            for ch in 0..c {
                for (i, (&g, &v)) in grad_out.plane(s, ch).iter().zip(x.plane(s, ch)).enumerate() {
                    gz[s * plane + i] += g * v;
                }
            }
        }
        for (g, &m) in gz.iter_mut().zip(&cache.gate) {
            *g = *g * m * (T::one() - m);
        }
        let gz = Tensor::from_vec([n, 1, h, w], gz)?;
        let cg = conv2d_backward(&cache.features, p.get(self.weight), &self.spec(), &gz)?;
        grads.accumulate(self.weight, cg.grad_weight.data());
        grads.accumulate(self.bias, &cg.grad_bias);
        let gf = &cg.grad_input;
        for s in 0..n {
            let gmean = gf.plane(s, 0).to_vec();
            let gmax = gf.plane(s, 1).to_vec();
            for ch in 0..c {
                let dst = gx.plane_mut(s, ch);
                for i in 0..plane {
                    dst[i] += gmean[i] / cf;
                }
            }
            for i in 0..plane {
                let ch = cache.argmax[s * plane + i];
                gx.plane_mut(s, ch)[i] += gmax[i];
            }
        }
        Ok(gx)
    }
}

/// Channel attention followed by spatial attention.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

#[derive(Clone, Debug)]
pub struct CbamCache<T> {
    channel: ChannelAttentionCache<T>,
    spatial: SpatialAttentionCache<T>,
}

impl Cbam {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        channels: usize,
        reduction: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(Cbam {
            channel: ChannelAttention::new(store, init, &format!("{prefix}.channel"), channels, reduction)?,
            spatial: SpatialAttention::new(store, init, &format!("{prefix}.spatial"), kernel)?,
        })
    }

    pub fn param_count(channels: usize, reduction: usize, kernel: usize) -> usize {
        ChannelAttention::param_count(channels, reduction) + SpatialAttention::param_count(kernel)
    }

    pub fn infer<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.channel.infer(p, x)?;
        self.spatial.infer(p, &y)
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, CbamCache<T>)> {
        let (y, channel) = self.channel.forward(p, x)?;
        let (z, spatial) = self.spatial.forward(p, &y)?;
        Ok((z, CbamCache { channel, spatial }))
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        cache: &CbamCache<T>,
        grad_out: &Tensor<T>,
        grads: &mut GradStore<T>,
    ) -> Result<Tensor<T>> {
        let g = self.spatial.backward(p, &cache.spatial, grad_out, grads)?;
        self.channel.backward(p, &cache.channel, &g, grads)
    }
}
