//! Reconstruction, mask-area, classifier-guidance and classifier-training
//! losses, each with its analytic gradient.
//!
//! Every logarithm takes `max(v, eps)`; where the clamp is active the
//! gradient through it is zero. All losses are averaged over the batch.

use ndarray::{Array2, Array4, Array5, ArrayView2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::domain::{Decomposition, ImageBatch, LabelMode, LossWeights, MaskStack, TagBatch};
use crate::error::{ensure_dim, Error, Result};
use crate::recompose::{
    average_mask_score, component_images, component_images_backward, recompose,
    recompose_backward,
};
use crate::scalar::Scalar;

/// A frozen multi-label classifier that can be differentiated with respect to
/// its input but whose own parameters are never updated.
///
/// `score` maps `(N, 3, H, W)` images to `(N, K - 1)` probabilities in `(0, 1)`.
pub trait ClassScorer<T: Scalar> {
    /// Activations retained between the forward pass and the input gradient.
    type Cache;

    fn num_outputs(&self) -> usize;

    fn score(&self, images: ArrayView4<'_, T>) -> Result<(Array2<T>, Self::Cache)>;

    /// `dL/d(images)` given `dL/d(scores)`; must not touch any parameter.
    fn score_input_grad(&self, cache: &Self::Cache, d_scores: ArrayView2<'_, T>) -> Array4<T>;
}

impl<T: Scalar, S: ClassScorer<T> + ?Sized> ClassScorer<T> for &S {
    type Cache = S::Cache;

    fn num_outputs(&self) -> usize {
        (**self).num_outputs()
    }

    fn score(&self, images: ArrayView4<'_, T>) -> Result<(Array2<T>, Self::Cache)> {
        (**self).score(images)
    }

    fn score_input_grad(&self, cache: &Self::Cache, d_scores: ArrayView2<'_, T>) -> Array4<T> {
        (**self).score_input_grad(cache, d_scores)
    }
}

/// Values of each loss term and their weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub mask: f64,
    pub cls: f64,
    pub total: f64,
    pub lambda_m: f64,
    pub lambda_c: f64,
    /// Batch-mean cross-entropy of each class's mask score; `mask` is their mean.
    pub mask_per_class: Vec<f64>,
    /// Batch-mean guidance term of each component image; `cls` is their mean.
    pub cls_per_class: Vec<f64>,
}

impl LossReport {
    fn assemble(
        recon: f64,
        mask: &MaskLossParts,
        cls: &ClsLossParts,
        weights: &LossWeights,
    ) -> Self {
        Self {
            recon,
            mask: mask.value,
            cls: cls.value,
            total: recon + weights.lambda_m * mask.value + weights.lambda_c * cls.value,
            lambda_m: weights.lambda_m,
            lambda_c: weights.lambda_c,
            mask_per_class: mask.per_class.clone(),
            cls_per_class: cls.per_class.clone(),
        }
    }

    /// Relative deviation of `total` from `recon + λm·mask + λc·cls`.
    pub fn identity_error(&self) -> f64 {
        let expected = self.recon + self.lambda_m * self.mask + self.lambda_c * self.cls;
        (self.total - expected).abs() / expected.abs().max(f64::MIN_POSITIVE)
    }

    pub fn is_finite(&self) -> bool {
        self.recon.is_finite() && self.mask.is_finite() && self.cls.is_finite() && self.total.is_finite()
    }
}

/// Gradients of the total loss with respect to the network outputs.
#[derive(Debug, Clone)]
pub struct TotalLossGrad<T> {
    pub report: LossReport,
    pub d_mask: Array4<T>,
    pub d_decomposition: Array5<T>,
}

#[inline]
fn clamped_log<T: Scalar>(v: T, eps: T) -> T {
    v.max(eps).ln()
}

/// `d/dv log(max(v, eps))`.
#[inline]
fn clamped_log_grad<T: Scalar>(v: T, eps: T) -> T {
    if v >= eps {
        v.recip()
    } else {
        T::zero()
    }
}

fn check_same_shape(a: ArrayView4<'_, impl Sized>, b: ArrayView4<'_, impl Sized>) -> Result<()> {
    let (ab, ac, ah, aw) = a.dim();
    let (bb, bc, bh, bw) = b.dim();
    ensure_dim("batch", bb, ab)?;
    ensure_dim("channel", bc, ac)?;
    ensure_dim("height", bh, ah)?;
    ensure_dim("width", bw, aw)
}

/// Mean squared error per image, averaged over the batch.
pub fn loss_recon<T: Scalar>(recon: ArrayView4<'_, T>, image: &ImageBatch<T>) -> Result<T> {
    loss_recon_grad(recon, image).map(|(v, _)| v)
}

pub fn loss_recon_grad<T: Scalar>(
    recon: ArrayView4<'_, T>,
    image: &ImageBatch<T>,
) -> Result<(T, Array4<T>)> {
    check_same_shape(recon, image.view())?;
    let diff = &recon - &image.view();
    let n = T::lit(diff.len() as f64);
    let value = diff.iter().map(|&d| d * d).sum::<T>() / n;
    let grad = diff * (T::lit(2.0) / n);
    Ok((value, grad))
}

struct MaskLossParts {
    value: f64,
    per_class: Vec<f64>,
}

fn mask_loss_parts<T: Scalar>(
    y_hat: ArrayView2<'_, T>,
    y: &TagBatch<T>,
    eps: f64,
) -> Result<(MaskLossParts, T, Array2<T>)> {
    let (b, k) = y_hat.dim();
    ensure_dim("batch", b, y.batch_size())?;
    ensure_dim("class", k, y.num_classes())?;
    let eps = T::lit(eps);
    let yv = y.view();
    let scale = T::one() / T::lit((b * k) as f64);
    let mut value = T::zero();
    let mut per_class = vec![0.0; k];
    let mut grad = Array2::zeros((b, k));
    for bi in 0..b {
        for ki in 0..k {
            let p = y_hat[[bi, ki]];
            let t = yv[[bi, ki]];
            let q = T::one() - p;
            let term = -(t * clamped_log(p, eps) + (T::one() - t) * clamped_log(q, eps));
            value += term * scale;
            per_class[ki] += term.as_f64() / b as f64;
            grad[[bi, ki]] = -(t * clamped_log_grad(p, eps)
                - (T::one() - t) * clamped_log_grad(q, eps))
                * scale;
        }
    }
    Ok((
        MaskLossParts {
            value: value.as_f64(),
            per_class,
        },
        value,
        grad,
    ))
}

/// Binary cross-entropy between mean mask scores `ŷ` and labels, averaged
/// over classes and batch. Soft-area labels use the same formula.
pub fn loss_mask<T: Scalar>(y_hat: ArrayView2<'_, T>, y: &TagBatch<T>, eps: f64) -> Result<T> {
    mask_loss_parts(y_hat, y, eps).map(|(_, v, _)| v)
}

/// [`loss_mask`] and its gradient with respect to `ŷ`.
pub fn loss_mask_grad<T: Scalar>(
    y_hat: ArrayView2<'_, T>,
    y: &TagBatch<T>,
    eps: f64,
) -> Result<(T, Array2<T>)> {
    mask_loss_parts(y_hat, y, eps).map(|(_, v, g)| (v, g))
}

struct ClsLossParts {
    value: f64,
    per_class: Vec<f64>,
}

/// Is class `k` counted as present for the positive guidance term?
fn present<T: Scalar>(mode: LabelMode, y: T) -> bool {
    match mode {
        LabelMode::Indicator => y == T::one(),
        LabelMode::SoftArea => y > T::zero(),
    }
}

fn cls_loss_impl<T: Scalar, G: ClassScorer<T>>(
    m: &MaskStack<T>,
    x: &Decomposition<T>,
    y: &TagBatch<T>,
    g: &G,
    eps: f64,
    want_grad: bool,
) -> Result<(ClsLossParts, T, Option<(Array4<T>, Array5<T>)>)> {
    let (b, k, h, w) = m.as_array().dim();
    ensure_dim("batch", b, y.batch_size())?;
    ensure_dim("class", k, y.num_classes())?;
    if g.num_outputs() != k - 1 {
        return Err(Error::Config(format!(
            "classifier has {} outputs, expected K - 1 = {}",
            g.num_outputs(),
            k - 1
        )));
    }
    let comp = component_images(m, x)?;
    let c = comp.dim().2;
    let flat = comp
        .view()
        .into_shape_with_order((b * k, c, h, w))
        .expect("component images are contiguous");
    let (scores, cache) = g.score(flat)?;
    ensure_dim("classifier output", k - 1, scores.ncols())?;
    ensure_dim("classifier rows", b * k, scores.nrows())?;
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("classifier produced a non-finite score".into()));
    }

    let eps_t = T::lit(eps);
    let yv = y.view();
    let scale = T::one() / T::lit((b * k) as f64);
    let background = k - 1;
    let mut value = T::zero();
    let mut per_class = vec![0.0; k];
    let mut d_scores = Array2::<T>::zeros(scores.dim());
    for bi in 0..b {
        for ki in 0..k {
            let row = bi * k + ki;
            let mut term = T::zero();
            if ki != background && present(y.mode(), yv[[bi, ki]]) {
                let s = scores[[row, ki]];
                term -= clamped_log(s, eps_t);
                d_scores[[row, ki]] -= clamped_log_grad(s, eps_t) * scale;
            }
            for j in (0..k - 1).filter(|&j| j != ki) {
                let q = T::one() - scores[[row, j]];
                term -= clamped_log(q, eps_t);
                d_scores[[row, j]] += clamped_log_grad(q, eps_t) * scale;
            }
            value += term * scale;
            per_class[ki] += term.as_f64() / b as f64;
        }
    }

    let grads = want_grad.then(|| {
        let d_flat = g.score_input_grad(&cache, d_scores.view());
        let d_comp = d_flat
            .into_shape_with_order((b, k, c, h, w))
            .expect("gradient matches component layout");
        component_images_backward(m.view(), x.view(), d_comp.view())
    });
    Ok((
        ClsLossParts {
            value: value.as_f64(),
            per_class,
        },
        value,
        grads,
    ))
}

/// Classifier-guidance loss on the per-class component images.
///
/// The classifier receives the `B·K` component images as one batch, ordered
/// sample-major (`row = b·K + k`). For each component `k` the loss rewards a
/// high score for `k` when it is a present foreground class, and penalizes
/// the score of every other foreground class. The background component only
/// receives the penalty, so it is pushed to contain no recognizable object.
pub fn loss_cls<T: Scalar, G: ClassScorer<T>>(
    m: &MaskStack<T>,
    x: &Decomposition<T>,
    y: &TagBatch<T>,
    g: &G,
    eps: f64,
) -> Result<T> {
    cls_loss_impl(m, x, y, g, eps, false).map(|(_, v, _)| v)
}

/// [`loss_cls`] with gradients `(dL/dm, dL/dx)`.
pub fn loss_cls_grad<T: Scalar, G: ClassScorer<T>>(
    m: &MaskStack<T>,
    x: &Decomposition<T>,
    y: &TagBatch<T>,
    g: &G,
    eps: f64,
) -> Result<(T, Array4<T>, Array5<T>)> {
    let (_, v, grads) = cls_loss_impl(m, x, y, g, eps, true)?;
    let (dm, dx) = grads.expect("gradients requested");
    Ok((v, dm, dx))
}

fn total_impl<T: Scalar, G: ClassScorer<T>>(
    m: &MaskStack<T>,
    x: &Decomposition<T>,
    image: &ImageBatch<T>,
    y: &TagBatch<T>,
    g: &G,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(LossReport, Option<(Array4<T>, Array5<T>)>)> {
    weights.validate()?;
    let recon = recompose(m, x)?;
    let (recon_value, d_recon) = loss_recon_grad(recon.view(), image)?;

    let y_hat = average_mask_score(m);
    let (mask_parts, _, d_yhat) = mask_loss_parts(y_hat.view(), y, weights.eps)?;

    let cls_grad = want_grad && weights.lambda_c > 0.0;
    let (cls_parts, _, cls_grads) = cls_loss_impl(m, x, y, g, weights.eps, cls_grad)?;

    let report = LossReport::assemble(recon_value.as_f64(), &mask_parts, &cls_parts, weights);
    if !want_grad {
        return Ok((report, None));
    }

    let (mut dm, mut dx) = recompose_backward(m.view(), x.view(), d_recon.view());
    let (_, _, h, w) = m.as_array().dim();
    let area_scale = T::lit(weights.lambda_m) / T::lit((h * w) as f64);
    let d_area = d_yhat.mapv(|v| v * area_scale);
    dm += &d_area
        .insert_axis(Axis(2))
        .insert_axis(Axis(3))
        .broadcast(dm.dim())
        .expect("broadcast over pixels");
    if let Some((dm_cls, dx_cls)) = cls_grads {
        let lc = T::lit(weights.lambda_c);
        dm.scaled_add(lc, &dm_cls);
        dx.scaled_add(lc, &dx_cls);
    }
    Ok((report, Some((dm, dx))))
}

/// Weighted sum `L_recon + λm·L_mask + λc·L_cls` on a batch.
pub fn loss_total<T: Scalar, G: ClassScorer<T>>(
    m: &MaskStack<T>,
    x: &Decomposition<T>,
    image: &ImageBatch<T>,
    y: &TagBatch<T>,
    g: &G,
    weights: &LossWeights,
) -> Result<LossReport> {
    total_impl(m, x, image, y, g, weights, false).map(|(r, _)| r)
}

/// [`loss_total`] with gradients with respect to the mask and decomposition.
pub fn loss_total_grad<T: Scalar, G: ClassScorer<T>>(
    m: &MaskStack<T>,
    x: &Decomposition<T>,
    image: &ImageBatch<T>,
    y: &TagBatch<T>,
    g: &G,
    weights: &LossWeights,
) -> Result<TotalLossGrad<T>> {
    let (report, grads) = total_impl(m, x, image, y, g, weights, true)?;
    let (d_mask, d_decomposition) = grads.expect("gradients requested");
    Ok(TotalLossGrad {
        report,
        d_mask,
        d_decomposition,
    })
}

/// Multi-label binary cross-entropy used to train the classifier, summed over
/// the `K - 1` foreground classes and averaged over the batch.
pub fn loss_classifier<T: Scalar>(z_hat: ArrayView2<'_, T>, y: &TagBatch<T>, eps: f64) -> Result<T> {
    loss_classifier_grad(z_hat, y, eps).map(|(v, _)| v)
}

pub fn loss_classifier_grad<T: Scalar>(
    z_hat: ArrayView2<'_, T>,
    y: &TagBatch<T>,
    eps: f64,
) -> Result<(T, Array2<T>)> {
    let (b, n) = z_hat.dim();
    ensure_dim("batch", y.batch_size(), b)?;
    ensure_dim("classifier output", y.num_classes() - 1, n)?;
    let eps = T::lit(eps);
    let yv = y.view();
    let scale = T::one() / T::lit(b as f64);
    let mut value = T::zero();
    let mut grad = Array2::zeros((b, n));
    for bi in 0..b {
        for j in 0..n {
            let p = z_hat[[bi, j]];
            let t = yv[[bi, j]];
            let q = T::one() - p;
            value -= (t * clamped_log(p, eps) + (T::one() - t) * clamped_log(q, eps)) * scale;
            grad[[bi, j]] =
                -(t * clamped_log_grad(p, eps) - (T::one() - t) * clamped_log_grad(q, eps)) * scale;
        }
    }
    Ok((value, grad))
}
