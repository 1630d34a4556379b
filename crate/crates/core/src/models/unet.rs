//! Mask network and decomposition network sharing one U-Net encoder.

use ndarray::{Array4, Array5};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::{LayerKind, LayerSpec, Layout, ModelSpec, RowLayout};
use crate::domain::{Decomposition, ImageBatch, MaskStack};
use crate::error::{Error, Result};
use crate::nn::layers::{
    concat_channels, leaky_relu_backward, leaky_relu_inplace, softmax_channels,
    softmax_channels_backward, split_channels, upsample_nearest, upsample_nearest_backward,
    PoolCache,
};
use crate::nn::{Conv2d, Gradients, Init, MaxPool2d, ParamId, ParamStore};
use crate::scalar::Scalar;

pub const ENCODER_PREFIX: &str = "encoder.";
pub const MASK_DECODER_PREFIX: &str = "mask_decoder.";
pub const IMAGE_DECODER_PREFIX: &str = "image_decoder.";

/// One row of the architecture: a block of one or two convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub kind: LayerKind,
    pub conv1: Conv2d,
    pub conv2: Option<Conv2d>,
    /// Leaky rectifier after the (last) convolution.
    pub activation: bool,
    pub skip_from: Option<usize>,
    /// Trailing input channels that come from the skip.
    pub skip_channels: usize,
}

#[derive(Debug, Clone)]
struct StageCache<T> {
    input: Array4<T>,
    a1: Array4<T>,
    /// Input of the second convolution (after upsampling for up blocks).
    mid: Option<Array4<T>>,
    a2: Option<Array4<T>>,
    pool: Option<PoolCache>,
}

impl Stage {
    fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        row: &LayerSpec,
        layout: &RowLayout,
        skip_from: Option<usize>,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let pad = row.kernel / 2;
        let init = if row.kind == LayerKind::Conv && !row.activation {
            Init::Linear
        } else {
            Init::KaimingLeaky(slope)
        };
        let conv1 = Conv2d::new(
            store,
            &format!("{name}.conv1"),
            layout.in_channels,
            row.out_channels,
            row.kernel,
            1,
            pad,
            true,
            init,
            rng,
        );
        let conv2 = matches!(row.kind, LayerKind::ConvBlock | LayerKind::ConvBlockUp).then(|| {
            Conv2d::new(
                store,
                &format!("{name}.conv2"),
                row.out_channels,
                row.out_channels,
                row.kernel,
                1,
                pad,
                true,
                init,
                rng,
            )
        });
        Self {
            kind: row.kind,
            conv1,
            conv2,
            activation: row.kind != LayerKind::Conv || row.activation,
            skip_from,
            skip_channels: layout.skip_channels,
        }
    }

    pub fn num_params(&self) -> usize {
        self.conv1.num_params() + self.conv2.as_ref().map_or(0, |c| c.num_params())
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.conv1.weight];
        ids.extend(self.conv1.bias);
        if let Some(c) = &self.conv2 {
            ids.push(c.weight);
            ids.extend(c.bias);
        }
        ids
    }

    fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: Array4<T>, slope: f64) -> (Array4<T>, StageCache<T>) {
        let mut a1 = self.conv1.forward(store, &x);
        if self.activation || self.conv2.is_some() {
            a1 = leaky_relu_inplace(a1, slope);
        }
        let Some(conv2) = &self.conv2 else {
            let out = a1.clone();
            return (
                out,
                StageCache {
                    input: x,
                    a1,
                    mid: None,
                    a2: None,
                    pool: None,
                },
            );
        };
        let mid = if self.kind == LayerKind::ConvBlockUp {
            Some(upsample_nearest(&a1, 2))
        } else {
            None
        };
        let a2 = leaky_relu_inplace(conv2.forward(store, mid.as_ref().unwrap_or(&a1)), slope);
        let (out, pool) = if self.kind == LayerKind::ConvBlock {
            let (o, c) = MaxPool2d::HALVE.forward(&a2);
            (o, Some(c))
        } else {
            (a2.clone(), None)
        };
        (
            out,
            StageCache {
                input: x,
                a1,
                mid,
                a2: Some(a2),
                pool,
            },
        )
    }

    fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &StageCache<T>,
        d_out: Array4<T>,
        grads: &mut Gradients<T>,
        slope: f64,
    ) -> Array4<T> {
        let d_a1 = match &self.conv2 {
            None => d_out,
            Some(conv2) => {
                let a2 = cache.a2.as_ref().expect("block cache");
                let d_a2 = match &cache.pool {
                    Some(p) => MaxPool2d::HALVE.backward(p, &d_out),
                    None => d_out,
                };
                let d_pre2 = leaky_relu_backward(a2, &d_a2, slope);
                let conv2_in = cache.mid.as_ref().unwrap_or(&cache.a1);
                let d_in2 = conv2.backward(store, conv2_in, &d_pre2, Some(grads));
                if cache.mid.is_some() {
                    upsample_nearest_backward(&d_in2, 2)
                } else {
                    d_in2
                }
            }
        };
        let d_pre1 = if self.activation || self.conv2.is_some() {
            leaky_relu_backward(&cache.a1, &d_a1, slope)
        } else {
            d_a1
        };
        self.conv1.backward(store, &cache.input, &d_pre1, Some(grads))
    }
}

/// Which decoder a [`Network`] view uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Mask,
    Decomposition,
}

/// `f_m` and `f_x`: two U-Nets whose encoders are one set of parameters.
#[derive(Debug, Clone)]
pub struct Segmenter<T> {
    spec: ModelSpec,
    store: ParamStore<T>,
    encoder: Vec<Stage>,
    mask_decoder: Vec<Stage>,
    image_decoder: Vec<Stage>,
}

/// Activations kept for the backward pass of [`Segmenter::forward_pair`].
#[derive(Debug, Clone)]
pub struct PairCache<T> {
    encoder: Vec<StageCache<T>>,
    mask_decoder: Vec<StageCache<T>>,
    image_decoder: Vec<StageCache<T>>,
    mask: Array4<T>,
}

/// Read-only view of one of the two networks.
#[derive(Debug, Clone, Copy)]
pub struct Network<'a, T> {
    segmenter: &'a Segmenter<T>,
    head: Head,
}

impl<'a, T: Scalar> Network<'a, T> {
    pub fn head(&self) -> Head {
        self.head
    }

    pub fn encoder(&self) -> &'a [Stage] {
        &self.segmenter.encoder
    }

    pub fn decoder(&self) -> &'a [Stage] {
        match self.head {
            Head::Mask => &self.segmenter.mask_decoder,
            Head::Decomposition => &self.segmenter.image_decoder,
        }
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        &self.segmenter.store
    }

    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.encoder().iter().flat_map(Stage::param_ids).collect()
    }

    pub fn num_params(&self) -> usize {
        self.encoder().iter().chain(self.decoder()).map(Stage::num_params).sum()
    }

    /// Raw decoder output: mask logits `(B, K, H, W)` or image-let channels
    /// `(B, 3K, H, W)`.
    pub fn forward_raw(&self, image: &ImageBatch<T>) -> Result<Array4<T>> {
        let s = self.segmenter;
        s.check_input(image)?;
        let (skips, _) = s.encode(image.as_array().clone(), false);
        let (out, _) = s.decode(self.decoder(), &skips, false);
        Ok(out)
    }
}

impl<T: Scalar> Segmenter<T> {
    /// Builds both networks, checking every row against its declared
    /// parameter count and output shape.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let layout = spec.derive_layout()?;
        verify_declared(spec, &layout)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let slope = spec.leaky_slope;
        let encoder = spec
            .encoder
            .iter()
            .zip(&layout.encoder)
            .enumerate()
            .map(|(i, (row, l))| {
                Stage::build(&mut store, &format!("{ENCODER_PREFIX}{i}"), row, l, None, slope, &mut rng)
            })
            .collect();
        let mut decoder = |prefix: &str, rows: &[LayerSpec], layouts: &[RowLayout]| -> Vec<Stage> {
            rows.iter()
                .zip(layouts)
                .enumerate()
                .map(|(i, (row, l))| {
                    let skip = spec
                        .skip_wiring
                        .iter()
                        .find(|s| s.decoder_stage == i)
                        .map(|s| s.encoder_stage);
                    Stage::build(&mut store, &format!("{prefix}{i}"), row, l, skip, slope, &mut rng)
                })
                .collect()
        };
        let mask_decoder = decoder(MASK_DECODER_PREFIX, &spec.decoder_mask, &layout.decoder_mask);
        let image_decoder = decoder(IMAGE_DECODER_PREFIX, &spec.decoder_x, &layout.decoder_x);
        let seg = Self {
            spec: spec.clone(),
            store,
            encoder,
            mask_decoder,
            image_decoder,
        };
        seg.verify_built()?;
        Ok(seg)
    }

    fn verify_built(&self) -> Result<()> {
        for (name, stages, rows) in [
            ("encoder", &self.encoder, &self.spec.encoder),
            ("mask decoder", &self.mask_decoder, &self.spec.decoder_mask),
            ("decomposition decoder", &self.image_decoder, &self.spec.decoder_x),
        ] {
            for (i, (stage, row)) in stages.iter().zip(rows).enumerate() {
                if stage.num_params() != row.declared_params {
                    return Err(Error::Construction {
                        stage: format!("{name} stage {i} ({})", row.describe()),
                        reason: format!(
                            "built {} parameters, declared {}",
                            stage.num_params(),
                            row.declared_params
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// `f_m`.
    pub fn mask_net(&self) -> Network<'_, T> {
        Network {
            segmenter: self,
            head: Head::Mask,
        }
    }

    /// `f_x`.
    pub fn image_net(&self) -> Network<'_, T> {
        Network {
            segmenter: self,
            head: Head::Decomposition,
        }
    }

    pub fn encoder_params(&self) -> usize {
        self.encoder.iter().map(Stage::num_params).sum()
    }

    pub fn mask_decoder_params(&self) -> usize {
        self.mask_decoder.iter().map(Stage::num_params).sum()
    }

    pub fn image_decoder_params(&self) -> usize {
        self.image_decoder.iter().map(Stage::num_params).sum()
    }

    pub fn stages(&self) -> (&[Stage], &[Stage], &[Stage]) {
        (&self.encoder, &self.mask_decoder, &self.image_decoder)
    }

    fn check_input(&self, image: &ImageBatch<T>) -> Result<()> {
        let (_, h, w) = self.spec.input_size;
        let (ih, iw) = image.spatial();
        if ih % 16 != 0 || iw % 16 != 0 {
            return Err(Error::Input(format!(
                "image size {ih}x{iw} is not divisible by 16"
            )));
        }
        if (ih, iw) != (h, w) {
            log::debug!("running a {h}x{w} model on {ih}x{iw} input");
        }
        Ok(())
    }

    /// Runs the encoder; returns every stage output (the last is the
    /// bottleneck) and, when requested, the caches.
    fn encode(&self, x: Array4<T>, keep: bool) -> (Vec<Array4<T>>, Vec<StageCache<T>>) {
        let slope = self.spec.leaky_slope;
        let mut outs = Vec::with_capacity(self.encoder.len());
        let mut caches = Vec::new();
        let mut cur = x;
        for stage in &self.encoder {
            let (out, cache) = stage.forward(&self.store, cur, slope);
            if keep {
                caches.push(cache);
            }
            outs.push(out.clone());
            cur = out;
        }
        (outs, caches)
    }

    fn decode(&self, stages: &[Stage], enc: &[Array4<T>], keep: bool) -> (Array4<T>, Vec<StageCache<T>>) {
        let slope = self.spec.leaky_slope;
        let mut caches = Vec::new();
        let mut cur = enc.last().expect("encoder output").clone();
        for stage in stages {
            let input = match stage.skip_from {
                Some(i) => concat_channels(&cur, &enc[i]),
                None => cur,
            };
            let (out, cache) = stage.forward(&self.store, input, slope);
            if keep {
                caches.push(cache);
            }
            cur = out;
        }
        (cur, caches)
    }

    /// Backward through a decoder, adding skip gradients into `d_enc`.
    fn decode_backward(
        &self,
        stages: &[Stage],
        caches: &[StageCache<T>],
        d_out: Array4<T>,
        d_enc: &mut [Option<Array4<T>>],
        grads: &mut Gradients<T>,
    ) {
        let slope = self.spec.leaky_slope;
        let mut d = d_out;
        for (stage, cache) in stages.iter().zip(caches).rev() {
            let d_in = stage.backward(&self.store, cache, d, grads, slope);
            d = match stage.skip_from {
                Some(i) => {
                    let prev_c = stage.conv1.in_channels - stage.skip_channels;
                    let (d_prev, d_skip) = split_channels(&d_in, prev_c);
                    accumulate(&mut d_enc[i], d_skip);
                    d_prev
                }
                None => d_in,
            };
        }
        let last = d_enc.len() - 1;
        accumulate(&mut d_enc[last], d);
    }

    /// Runs the shared encoder once and both decoders.
    pub fn forward_pair(
        &self,
        image: &ImageBatch<T>,
    ) -> Result<(MaskStack<T>, Decomposition<T>, PairCache<T>)> {
        self.check_input(image)?;
        let (enc_out, enc_cache) = self.encode(image.as_array().clone(), true);
        let (logits, mask_cache) = self.decode(&self.mask_decoder, &enc_out, true);
        let (raw_x, image_cache) = self.decode(&self.image_decoder, &enc_out, true);
        let mask = softmax_channels(&logits);
        let x = reshape_decomposition(raw_x, self.spec.num_classes);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("decomposition network produced non-finite values".into()));
        }
        Ok((
            MaskStack::from_softmax(mask.clone()),
            Decomposition::new(x)?,
            PairCache {
                encoder: enc_cache,
                mask_decoder: mask_cache,
                image_decoder: image_cache,
                mask,
            },
        ))
    }

    /// Accumulates parameter gradients given `dL/dM` (with respect to the
    /// softmax probabilities) and `dL/dX`.
    pub fn backward_pair(
        &self,
        cache: &PairCache<T>,
        d_mask: &Array4<T>,
        d_decomposition: &Array5<T>,
        grads: &mut Gradients<T>,
    ) {
        let d_logits = softmax_channels_backward(&cache.mask, d_mask);
        let (b, k, c, h, w) = d_decomposition.dim();
        let d_raw = d_decomposition
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, k * c, h, w))
            .expect("contiguous decomposition gradient");
        let mut d_enc: Vec<Option<Array4<T>>> = vec![None; self.encoder.len()];
        self.decode_backward(&self.mask_decoder, &cache.mask_decoder, d_logits, &mut d_enc, grads);
        self.decode_backward(&self.image_decoder, &cache.image_decoder, d_raw, &mut d_enc, grads);

        let slope = self.spec.leaky_slope;
        let mut d: Option<Array4<T>> = None;
        for (i, (stage, sc)) in self.encoder.iter().zip(&cache.encoder).enumerate().rev() {
            let mut d_out = d.take().unwrap_or_else(|| Array4::zeros(stage_out_dim(stage, sc)));
            if let Some(extra) = d_enc[i].take() {
                d_out += &extra;
            }
            d = Some(stage.backward(&self.store, sc, d_out, grads, slope));
        }
    }

    /// Mask network only: per-pixel class probabilities.
    pub fn predict_mask(&self, image: &ImageBatch<T>) -> Result<MaskStack<T>> {
        let logits = self.mask_net().forward_raw(image)?;
        Ok(MaskStack::from_softmax(softmax_channels(&logits)))
    }

    /// Decomposition network only.
    pub fn decompose(&self, image: &ImageBatch<T>) -> Result<Decomposition<T>> {
        let raw = self.image_net().forward_raw(image)?;
        Decomposition::new(reshape_decomposition(raw, self.spec.num_classes))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Array4<T>>, d: Array4<T>) {
    match slot {
        Some(acc) => *acc += &d,
        None => *slot = Some(d),
    }
}

fn stage_out_dim<T>(stage: &Stage, cache: &StageCache<T>) -> (usize, usize, usize, usize) {
    let (b, _, h, w) = cache.input.dim();
    let c = stage.conv2.as_ref().unwrap_or(&stage.conv1).out_channels;
    match stage.kind {
        LayerKind::ConvBlock => (b, c, h / 2, w / 2),
        LayerKind::ConvBlockUp => (b, c, h * 2, w * 2),
        _ => (b, c, h, w),
    }
}

/// `(B, 3K, H, W)` channels `k·3 + c` into `(B, K, 3, H, W)`.
fn reshape_decomposition<T: Scalar>(raw: Array4<T>, k: usize) -> Array5<T> {
    let (b, kc, h, w) = raw.dim();
    raw.into_shape_with_order((b, k, kc / k, h, w))
        .expect("decoder output is contiguous")
}

fn verify_declared(spec: &ModelSpec, layout: &Layout) -> Result<()> {
    for (name, rows, layouts) in [
        ("encoder", &spec.encoder, &layout.encoder),
        ("mask decoder", &spec.decoder_mask, &layout.decoder_mask),
        ("decomposition decoder", &spec.decoder_x, &layout.decoder_x),
    ] {
        for (i, (row, l)) in rows.iter().zip(layouts).enumerate() {
            if row.declared_params != l.params {
                return Err(Error::Construction {
                    stage: format!("{name} stage {i} ({})", row.describe()),
                    reason: format!(
                        "wiring yields {} parameters, declared {} (input channels {})",
                        l.params, row.declared_params, l.in_channels
                    ),
                });
            }
            if row.declared_out_shape != l.out_shape {
                return Err(Error::Construction {
                    stage: format!("{name} stage {i} ({})", row.describe()),
                    reason: format!(
                        "output shape {:?}, declared {:?}",
                        l.out_shape, row.declared_out_shape
                    ),
                });
            }
        }
    }
    Ok(())
}
