//! 18-layer residual network with a `K − 1` output logistic head.
//!
//! Parameter names follow the torchvision layout (`conv1.weight`,
//! `layer2.0.downsample.1.running_var`, ...) so exported ImageNet weights can
//! be loaded directly; the final linear layer is always freshly initialized.

use std::path::Path;

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassScorer;
use crate::nn::layers::{
    global_avg_pool, global_avg_pool_backward, relu_backward_from_output, relu_inplace, sigmoid,
    BnCache, PoolCache,
};
use crate::nn::{BatchNorm2d, Conv2d, Gradients, Init, Linear, MaxPool2d, ParamStore};
use crate::scalar::Scalar;

/// Environment variable naming a safetensors file of pretrained weights.
pub const PRETRAINED_ENV: &str = "DECOMPSEG_RESNET18_WEIGHTS";

/// Per-channel input normalization applied before the stem.
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

const STEM_POOL: MaxPool2d = MaxPool2d {
    kernel: 3,
    stride: 2,
    padding: 1,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub num_classes: usize,
    /// Channels of the first residual stage; 64 for the standard network.
    pub base_width: usize,
    pub input_size: (usize, usize),
}

impl ClassifierSpec {
    pub fn standard(num_classes: usize) -> Self {
        Self {
            num_classes,
            base_width: 64,
            input_size: (224, 224),
        }
    }

    /// Same topology with a quarter of the width, at 64×64.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            num_classes,
            base_width: 16,
            input_size: (64, 64),
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.num_classes - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Array4<T>,
    bn1: BnCache<T>,
    a1: Array4<T>,
    bn2: BnCache<T>,
    down: Option<BnCache<T>>,
    out: Array4<T>,
}

/// Activations of a full forward pass, needed for any backward pass.
#[derive(Debug, Clone)]
pub struct ClassifierCache<T> {
    normalized: Array4<T>,
    stem_bn: BnCache<T>,
    stem_act: Array4<T>,
    pool: PoolCache,
    blocks: Vec<BlockCache<T>>,
    features_hw: (usize, usize),
    pooled: Array2<T>,
    probs: Array2<T>,
}

/// Parameter access for one pass; training mode mutates batch-norm buffers.
enum Access<'a, T> {
    Ro(&'a ParamStore<T>),
    Rw(&'a mut ParamStore<T>),
}

impl<T: Scalar> Access<'_, T> {
    fn ro(&self) -> &ParamStore<T> {
        match self {
            Access::Ro(s) => s,
            Access::Rw(s) => s,
        }
    }

    fn bn(&mut self, bn: &BatchNorm2d, x: &Array4<T>) -> (Array4<T>, BnCache<T>) {
        match self {
            Access::Ro(s) => bn.forward_eval(s, x),
            Access::Rw(s) => bn.forward_train(s, x),
        }
    }
}


/// The classifier `g`.
#[derive(Debug, Clone)]
pub struct Classifier<T> {
    spec: ClassifierSpec,
    store: ParamStore<T>,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<BasicBlock>,
    fc: Linear,
    frozen: bool,
}

impl<T: Scalar> Classifier<T> {
    /// Randomly initialized network.
    pub fn build(spec: &ClassifierSpec, seed: u64) -> Result<Self> {
        if spec.num_classes < 2 {
            return Err(Error::Config(format!("K must be >= 2, got {}", spec.num_classes)));
        }
        if spec.base_width == 0 {
            return Err(Error::Config("base width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let relu = Init::KaimingLeaky(0.0);
        let w = spec.base_width;
        let stem = Conv2d::new(&mut store, "conv1", 3, w, 7, 2, 3, false, relu, &mut rng);
        let stem_bn = BatchNorm2d::new(&mut store, "bn1", w);
        let mut blocks = Vec::new();
        let mut in_c = w;
        for (layer, mult) in [1usize, 2, 4, 8].into_iter().enumerate() {
            let out_c = w * mult;
            for idx in 0..2 {
                let stride = if layer > 0 && idx == 0 { 2 } else { 1 };
                let name = format!("layer{}.{idx}", layer + 1);
                let conv1 = Conv2d::new(&mut store, &format!("{name}.conv1"), in_c, out_c, 3, stride, 1, false, relu, &mut rng);
                let bn1 = BatchNorm2d::new(&mut store, &format!("{name}.bn1"), out_c);
                let conv2 = Conv2d::new(&mut store, &format!("{name}.conv2"), out_c, out_c, 3, 1, 1, false, relu, &mut rng);
                let bn2 = BatchNorm2d::new(&mut store, &format!("{name}.bn2"), out_c);
                let downsample = (stride != 1 || in_c != out_c).then(|| {
                    (
                        Conv2d::new(&mut store, &format!("{name}.downsample.0"), in_c, out_c, 1, stride, 0, false, Init::Linear, &mut rng),
                        BatchNorm2d::new(&mut store, &format!("{name}.downsample.1"), out_c),
                    )
                });
                blocks.push(BasicBlock {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    downsample,
                });
                in_c = out_c;
            }
        }
        let fc = Linear::new(&mut store, "fc", in_c, spec.num_outputs(), Init::Linear, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            store,
            stem,
            stem_bn,
            blocks,
            fc,
            frozen: false,
        })
    }

    /// Network whose backbone is loaded from a safetensors file with
    /// torchvision names; the head stays freshly initialized.
    pub fn pretrained(spec: &ClassifierSpec, weights: &Path, seed: u64) -> Result<Self> {
        let mut net = Self::build(spec, seed)?;
        let tensors = crate::checkpoint::read_tensors::<T>(weights).map_err(|e| {
            Error::Resource(format!(
                "pretrained weights unavailable at {}: {e}",
                weights.display()
            ))
        })?;
        for entry in net.store.entries_mut() {
            if entry.name.starts_with("fc.") {
                continue;
            }
            let (_, v) = tensors
                .iter()
                .find(|(n, _)| *n == entry.name)
                .ok_or_else(|| Error::Resource(format!("pretrained weights lack `{}`", entry.name)))?;
            if v.shape() != entry.value.shape() {
                return Err(Error::Resource(format!(
                    "pretrained `{}` has shape {:?}, expected {:?}",
                    entry.name,
                    v.shape(),
                    entry.value.shape()
                )));
            }
            entry.value.assign(v);
        }
        Ok(net)
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.count_trainable("")
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    fn normalize(&self, images: ArrayView4<'_, T>) -> Result<Array4<T>> {
        let (_, c, h, w) = images.dim();
        if c != 3 {
            return Err(Error::dim("channel", 3, c));
        }
        if h < 32 || w < 32 {
            return Err(Error::Input(format!("classifier input {h}x{w} is smaller than 32x32")));
        }
        let mut x = images.to_owned();
        for ci in 0..3 {
            let mean = T::lit(IMAGENET_MEAN[ci]);
            let inv = T::lit(1.0 / IMAGENET_STD[ci]);
            x.slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|v| (v - mean) * inv);
        }
        Ok(x)
    }

    fn forward_batch_stats(&mut self, images: ArrayView4<'_, T>) -> Result<(Array2<T>, ClassifierCache<T>)> {
        let normalized = self.normalize(images)?;
        let cache = Self::run(&mut Access::Rw(&mut self.store), &self.stem, &self.stem_bn, &self.blocks, &self.fc, normalized)?;
        Ok((cache.probs.clone(), cache))
    }

    fn run(
        st: &mut Access<'_, T>,
        stem: &Conv2d,
        stem_bn: &BatchNorm2d,
        blocks: &[BasicBlock],
        fc: &Linear,
        normalized: Array4<T>,
    ) -> Result<ClassifierCache<T>> {
        let s = stem.forward(st.ro(), &normalized);
        let (s, stem_bn_cache) = st.bn(stem_bn, &s);
        let stem_act = relu_inplace(s);
        let (mut cur, pool) = STEM_POOL.forward(&stem_act);
        let mut block_caches = Vec::with_capacity(blocks.len());
        for block in blocks {
            let input = cur;
            let h = block.conv1.forward(st.ro(), &input);
            let (h, bn1) = st.bn(&block.bn1, &h);
            let a1 = relu_inplace(h);
            let h = block.conv2.forward(st.ro(), &a1);
            let (mut h, bn2) = st.bn(&block.bn2, &h);
            let down = match &block.downsample {
                Some((conv, bn)) => {
                    let d = conv.forward(st.ro(), &input);
                    let (d, c) = st.bn(bn, &d);
                    h += &d;
                    Some(c)
                }
                None => {
                    h += &input;
                    None
                }
            };
            let out = relu_inplace(h);
            cur = out.clone();
            block_caches.push(BlockCache {
                input,
                bn1,
                a1,
                bn2,
                down,
                out,
            });
        }
        let (_, _, fh, fw) = cur.dim();
        let pooled = global_avg_pool(&cur);
        let logits = fc.forward(st.ro(), &pooled);
        let probs = logits.mapv(sigmoid);
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("classifier produced non-finite output".into()));
        }
        Ok(ClassifierCache {
            normalized,
            stem_bn: stem_bn_cache,
            stem_act,
            pool,
            blocks: block_caches,
            features_hw: (fh, fw),
            pooled,
            probs,
        })
    }

    /// Probabilities using running batch-norm statistics.
    pub fn predict(&self, images: ArrayView4<'_, T>) -> Result<Array2<T>> {
        self.score(images).map(|(p, _)| p)
    }

    /// Training-mode forward: batch statistics, running estimates updated.
    pub fn forward_train(&mut self, images: ArrayView4<'_, T>) -> Result<(Array2<T>, ClassifierCache<T>)> {
        if self.frozen {
            return Err(Error::Config("classifier is frozen".into()));
        }
        self.forward_batch_stats(images)
    }

    /// Backward from `dL/d(logits)`; parameter gradients only when `grads` is given.
    pub fn backward_logits(
        &self,
        cache: &ClassifierCache<T>,
        d_logits: &Array2<T>,
        mut grads: Option<&mut Gradients<T>>,
    ) -> Array4<T> {
        let st = &self.store;
        let d_pooled = self.fc.backward(st, &cache.pooled, d_logits, grads.as_deref_mut());
        let (fh, fw) = cache.features_hw;
        let mut d = global_avg_pool_backward(&d_pooled, fh, fw);
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let d_sum = relu_backward_from_output(&bc.out, &d);
            let d_input_skip = match (&block.downsample, &bc.down) {
                (Some((conv, bn)), Some(c)) => {
                    let dd = bn.backward(st, c, &d_sum, grads.as_deref_mut());
                    conv.backward(st, &bc.input, &dd, grads.as_deref_mut())
                }
                _ => d_sum.clone(),
            };
            let dh = block.bn2.backward(st, &bc.bn2, &d_sum, grads.as_deref_mut());
            let da1 = block.conv2.backward(st, &bc.a1, &dh, grads.as_deref_mut());
            let dh = relu_backward_from_output(&bc.a1, &da1);
            let dh = block.bn1.backward(st, &bc.bn1, &dh, grads.as_deref_mut());
            let mut d_in = block.conv1.backward(st, &bc.input, &dh, grads.as_deref_mut());
            d_in += &d_input_skip;
            d = d_in;
        }
        let d = STEM_POOL.backward(&cache.pool, &d);
        let d = relu_backward_from_output(&cache.stem_act, &d);
        let d = self.stem_bn.backward(st, &cache.stem_bn, &d, grads.as_deref_mut());
        let mut dx = self.stem.backward(st, &cache.normalized, &d, grads);
        for ci in 0..3 {
            let inv = T::lit(1.0 / IMAGENET_STD[ci]);
            dx.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|v| v * inv);
        }
        dx
    }

    /// `dL/d(logits)` from `dL/d(probs)` through the logistic function.
    pub fn probs_to_logit_grad(cache: &ClassifierCache<T>, d_probs: ArrayView2<'_, T>) -> Array2<T> {
        let mut d = d_probs.to_owned();
        ndarray::Zip::from(&mut d)
            .and(&cache.probs)
            .for_each(|g, &p| *g *= p * (T::one() - p));
        d
    }
}

impl<T: Scalar> ClassScorer<T> for Classifier<T> {
    type Cache = ClassifierCache<T>;

    fn num_outputs(&self) -> usize {
        self.spec.num_outputs()
    }

    fn score(&self, images: ArrayView4<'_, T>) -> Result<(Array2<T>, Self::Cache)> {
        let normalized = self.normalize(images)?;
        let cache = Self::run(&mut Access::Ro(&self.store), &self.stem, &self.stem_bn, &self.blocks, &self.fc, normalized)?;
        Ok((cache.probs.clone(), cache))
    }

    fn score_input_grad(&self, cache: &Self::Cache, d_scores: ArrayView2<'_, T>) -> Array4<T> {
        let d_logits = Self::probs_to_logit_grad(cache, d_scores);
        self.backward_logits(cache, &d_logits, None)
    }
}

/// Loads the network for `spec`: pretrained when requested, from `weights`
/// or [`PRETRAINED_ENV`], otherwise randomly initialized.
pub fn build_classifier<T: Scalar>(
    spec: &ClassifierSpec,
    pretrained: bool,
    weights: Option<&Path>,
    seed: u64,
) -> Result<Classifier<T>> {
    if !pretrained {
        return Classifier::build(spec, seed);
    }
    let path = match weights {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(PRETRAINED_ENV)
            .map(Into::into)
            .ok_or_else(|| {
                Error::Resource(format!(
                    "pretrained weights requested but no file given and {PRETRAINED_ENV} is unset"
                ))
            })?,
    };
    if !path.exists() {
        return Err(Error::Resource(format!(
            "pretrained weights file {} does not exist",
            path.display()
        )));
    }
    Classifier::pretrained(spec, &path, seed)
}
