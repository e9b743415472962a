use super::config::{Architecture, ModelConfig, SPATIAL_MULTIPLE};
use crate::error::{Error, Result};
use crate::nn::{
    BatchNorm, Cbam, CbamCache, Conv2dLayer, DoubleConv, DoubleConvCache, GradStore, Initializer, Mode,
    ParamStore,
};
use crate::scalar::Scalar;
use crate::tensor::{
    bilinear_resize, bilinear_resize_backward, concat_channels, crop_back, max_pool2, max_pool2_backward,
    pad_reflect_to, split_channels, PadInfo, PoolIndices, Tensor,
};

/// Small attention U-Net.
///
/// Encoder: five double-conv stages separated by 2×2 max pooling, with CBAM
/// applied to each stage output on the skip branch (the bottleneck's CBAM
/// output feeds the decoder). Decoder: four stages of ×2 bilinear upsampling,
/// concat with the attended skip (skip first), then a double-conv. A 1×1 head
/// emits logits.
#[derive(Clone, Debug)]
pub struct SmaAtUNet<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoders: Vec<DoubleConv<T>>,
    attention: Vec<Cbam>,
    decoders: Vec<DoubleConv<T>>,
    head: Conv2dLayer,
    cache: Option<ForwardCache<T>>,
}

#[derive(Clone, Debug)]
struct ForwardCache<T> {
    pad: PadInfo,
    pools: Vec<PoolIndices>,
    encoders: Vec<DoubleConvCache<T>>,
    attention: Vec<Option<CbamCache<T>>>,
    decoders: Vec<DoubleConvCache<T>>,
    upsample_inputs: Vec<[usize; 4]>,
    head_input: Tensor<T>,
}

fn padded(len: usize) -> usize {
    len.div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE
}

impl<T: Scalar> SmaAtUNet<T> {
    /// Builds the graph and initializes every parameter from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let enc = config.encoder_channels();
        let k = config.depth_multiplier;
        let block = |params: &mut ParamStore<T>, init: &mut Initializer, name: &str, c_in, c_out| match config
            .architecture
        {
            Architecture::SmaAt => DoubleConv::separable(params, init, name, c_in, c_out, k),
            Architecture::BaselineUnet => DoubleConv::standard(params, init, name, c_in, c_out),
        };
        let mut encoders = Vec::with_capacity(5);
        let mut attention = Vec::new();
        let mut c_prev = config.in_channels;
        for (i, &c) in enc.iter().enumerate() {
            encoders.push(block(&mut params, &mut init, &format!("enc{}", i + 1), c_prev, c)?);
            if config.architecture == Architecture::SmaAt {
                attention.push(Cbam::new(
                    &mut params,
                    &mut init,
                    &format!("cbam{}", i + 1),
                    c,
                    config.cbam_reduction,
                    config.spatial_kernel,
                )?);
            }
            c_prev = c;
        }
        let mut decoders = Vec::with_capacity(4);
        for (d, i) in (0..4).rev().enumerate() {
            decoders.push(block(
                &mut params,
                &mut init,
                &format!("dec{}", d + 1),
                enc[i] + c_prev,
                enc[i],
            )?);
            c_prev = enc[i];
        }
        let head = Conv2dLayer::new(&mut params, &mut init, "head", c_prev, config.out_channels, 1)?;
        Ok(SmaAtUNet {
            config,
            params,
            encoders,
            attention,
            decoders,
            head,
            cache: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Trainable scalar count; batch-norm running statistics are excluded.
    pub fn count_params(&self) -> usize {
        self.params.element_count()
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm<T>> {
        self.encoders
            .iter()
            .chain(&self.decoders)
            .flat_map(|b| b.batch_norms())
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm<T>> {
        self.encoders
            .iter_mut()
            .chain(self.decoders.iter_mut())
            .flat_map(|b| b.batch_norms_mut())
    }

    /// Drops any cached activations (e.g. before cloning a snapshot).
    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.dims();
        if c != self.config.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h < SPATIAL_MULTIPLE || w < SPATIAL_MULTIPLE {
            return Err(Error::shape(format!(
                "input {h}x{w} smaller than {SPATIAL_MULTIPLE}x{SPATIAL_MULTIPLE}"
            )));
        }
        Ok(())
    }

    /// Runs the network. Train mode uses batch statistics, updates running
    /// statistics and caches activations for [`Self::backward`]; eval mode is pure.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => self.infer(x),
            Mode::Train => self.forward_train(x),
        }
    }

    /// Eval-mode forward; never touches model state.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_probed(x, &mut |_, _| {})
    }

    /// Eval-mode forward that reports each stage's channel-attention gates
    /// (length N·C) to `probe` before they are applied.
    pub fn infer_probed(&self, x: &Tensor<T>, probe: &mut dyn FnMut(usize, &[T])) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let p = &self.params;
        let (mut h, pad) = pad_reflect_to(x, padded(x.h()), padded(x.w()))?;
        let mut skips = Vec::with_capacity(5);
        for (i, enc) in self.encoders.iter().enumerate() {
            if i > 0 {
                h = max_pool2(&h)?.0;
            }
            h = enc.infer(p, &h)?;
            let skip = match self.attention.get(i) {
                Some(cbam) => {
                    probe(i, &cbam.channel.gates(p, &h)?);
                    cbam.infer(p, &h)?
                }
                None => h.clone(),
            };
            skips.push(skip);
        }
        let mut prev = skips.pop().expect("five stages");
        for dec in &self.decoders {
            let skip = skips.pop().expect("skip per decoder");
            let up = bilinear_resize(&prev, skip.h(), skip.w())?;
            prev = dec.infer(p, &concat_channels(&skip, &up)?)?;
        }
        let logits = self.head.infer(p, &prev)?;
        crop_back(&logits, &pad)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.cache = None;
        let p = &self.params;
        let (mut h, pad) = pad_reflect_to(x, padded(x.h()), padded(x.w()))?;
        let mut pools = Vec::with_capacity(4);
        let mut enc_caches = Vec::with_capacity(5);
        let mut att_caches = Vec::with_capacity(5);
        let mut skips = Vec::with_capacity(5);
        for (i, enc) in self.encoders.iter_mut().enumerate() {
            if i > 0 {
                let (pooled, idx) = max_pool2(&h)?;
                pools.push(idx);
                h = pooled;
            }
            let (out, cache) = enc.forward(p, &h)?;
            enc_caches.push(cache);
            h = out;
            match self.attention.get(i) {
                Some(cbam) => {
                    let (skip, cache) = cbam.forward(p, &h)?;
                    att_caches.push(Some(cache));
                    skips.push(skip);
                }
                None => {
                    att_caches.push(None);
                    skips.push(h.clone());
                }
            }
        }
        let mut prev = skips.pop().expect("five stages");
        let mut dec_caches = Vec::with_capacity(4);
        let mut upsample_inputs = Vec::with_capacity(4);
        for dec in self.decoders.iter_mut() {
            let skip = skips.pop().expect("skip per decoder");
            upsample_inputs.push(prev.dims());
            let up = bilinear_resize(&prev, skip.h(), skip.w())?;
            let (out, cache) = dec.forward(p, &concat_channels(&skip, &up)?)?;
            dec_caches.push(cache);
            prev = out;
        }
        let logits = self.head.infer(p, &prev)?;
        let out = crop_back(&logits, &pad)?;
        self.cache = Some(ForwardCache {
            pad,
            pools,
            encoders: enc_caches,
            attention: att_caches,
            decoders: dec_caches,
            upsample_inputs,
            head_input: prev,
        });
        Ok(out)
    }

    /// Gradients of every parameter block given d(loss)/d(output). Consumes
    /// the activations cached by the last train-mode forward.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<GradStore<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a cached train-mode forward".into()))?;
        let p = &self.params;
        let mut grads = p.zeros_like();
        let pad = cache.pad;
        let [n, _, _, _] = cache.head_input.dims();
        if grad_out.dims() != [n, self.config.out_channels, pad.orig_h, pad.orig_w] {
            return Err(Error::shape(format!(
                "grad_out dims {:?} do not match the cached forward output",
                grad_out.dims()
            )));
        }
        // crop backward: embed into the padded plane
        let mut g_logits = Tensor::zeros([n, self.config.out_channels, pad.padded_h, pad.padded_w]);
        for s in 0..n {
            for ch in 0..self.config.out_channels {
                let src = grad_out.plane(s, ch);
                let dst = g_logits.plane_mut(s, ch);
                for y in 0..pad.orig_h {
                    let row = (y + pad.top) * pad.padded_w + pad.left;
                    dst[row..row + pad.orig_w].copy_from_slice(&src[y * pad.orig_w..(y + 1) * pad.orig_w]);
                }
            }
        }
        let mut g = self.head.backward(p, &cache.head_input, &g_logits, &mut grads)?;

        let enc_ch = self.config.encoder_channels();
        let mut g_skips: Vec<Option<Tensor<T>>> = vec![None; 5];
        for (d, dec) in self.decoders.iter().enumerate().rev() {
            let i = 3 - d;
            let g_cat = dec.backward(p, &cache.decoders[d], &g, &mut grads)?;
            let (g_skip, g_up) = split_channels(&g_cat, enc_ch[i])?;
            g_skips[i] = Some(g_skip);
            g = bilinear_resize_backward(cache.upsample_inputs[d], &g_up)?;
        }
        g_skips[4] = Some(g);

        let mut g_main: Option<Tensor<T>> = None;
        for i in (0..5).rev() {
            let g_skip = g_skips[i].take().expect("skip gradient");
            let mut g_h = match (&self.attention.get(i), &cache.attention[i]) {
                (Some(cbam), Some(c)) => cbam.backward(p, c, &g_skip, &mut grads)?,
                _ => g_skip,
            };
            if let Some(gm) = g_main.take() {
                g_h.data_mut().iter_mut().zip(gm.data()).for_each(|(a, &b)| *a += b);
            }
            let g_in = self.encoders[i].backward(p, &cache.encoders[i], &g_h, &mut grads)?;
            if i > 0 {
                g_main = Some(max_pool2_backward(&cache.pools[i - 1], &g_in)?);
            }
        }
        Ok(grads)
    }
}
