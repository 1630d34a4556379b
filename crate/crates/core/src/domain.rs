//! Validated tensors passed between the networks, the losses and evaluation.
//!
//! Layouts follow NCHW throughout: images are `(B, 3, H, W)`, masks
//! `(B, K, H, W)` and decompositions `(B, K, 3, H, W)`. The background class is
//! always the last class index `K - 1`.

use ndarray::{Array2, Array4, Array5, ArrayView2, ArrayView4, ArrayView5, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::scalar::Scalar;

/// Number of colour channels in every image.
pub const CHANNELS: usize = 3;

const SIMPLEX_TOL: f64 = 1e-5;
const SOFT_SUM_TOL: f64 = 1e-6;

/// A batch of RGB images with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T> {
    data: Array4<T>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(data: Array4<T>) -> Result<Self> {
        let (b, c, _, _) = data.dim();
        if b == 0 {
            return Err(Error::Invalid("image batch is empty".into()));
        }
        ensure_dim("channel", CHANNELS, c)?;
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || **v < T::zero() || **v > T::one())
        {
            return Err(Error::Invalid(format!(
                "image intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self { data })
    }

    pub fn view(&self) -> ArrayView4<'_, T> {
        self.data.view()
    }

    pub fn as_array(&self) -> &Array4<T> {
        &self.data
    }

    pub fn into_inner(self) -> Array4<T> {
        self.data
    }

    pub fn batch_size(&self) -> usize {
        self.data.dim().0
    }

    /// Spatial size `(H, W)`.
    pub fn spatial(&self) -> (usize, usize) {
        let (_, _, h, w) = self.data.dim();
        (h, w)
    }
}

/// How the components of a label vector are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// `y_k = 1` iff class `k` appears in the image.
    #[default]
    Indicator,
    /// `y_k` is the expected fraction of the image covered by class `k`.
    SoftArea,
}

/// Per-image class vector; the last component is the background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagLabel {
    pub y: Vec<f64>,
    #[serde(default)]
    pub mode: LabelMode,
}

impl TagLabel {
    pub fn indicator(y: Vec<f64>) -> Result<Self> {
        let label = Self {
            y,
            mode: LabelMode::Indicator,
        };
        label.validate()?;
        Ok(label)
    }

    pub fn soft_area(y: Vec<f64>) -> Result<Self> {
        let label = Self {
            y,
            mode: LabelMode::SoftArea,
        };
        label.validate()?;
        Ok(label)
    }

    /// Indicator label for the given foreground classes (0-based) out of `k`.
    pub fn from_present(k: usize, present: &[usize]) -> Result<Self> {
        let mut y = vec![0.0; k];
        for &c in present {
            if c + 1 >= k {
                return Err(Error::Invalid(format!(
                    "foreground class {c} out of range for K = {k}"
                )));
            }
            y[c] = 1.0;
        }
        if let Some(last) = y.last_mut() {
            *last = 1.0;
        }
        Self::indicator(y)
    }

    pub fn num_classes(&self) -> usize {
        self.y.len()
    }

    pub fn background_index(&self) -> usize {
        self.y.len() - 1
    }

    /// True when any foreground class is marked present (nonzero).
    pub fn has_foreground(&self) -> bool {
        self.y[..self.y.len() - 1].iter().any(|&v| v > 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.y.len();
        if k < 2 {
            return Err(Error::Invalid(format!("label needs K >= 2, got {k}")));
        }
        match self.mode {
            LabelMode::Indicator => {
                if let Some(v) = self.y.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Invalid(format!(
                        "indicator label component {v} not in {{0, 1}}"
                    )));
                }
                if self.y[k - 1] != 1.0 {
                    return Err(Error::Invalid(
                        "indicator label must mark the background as present".into(),
                    ));
                }
            }
            LabelMode::SoftArea => {
                if let Some(v) = self
                    .y
                    .iter()
                    .find(|&&v| !v.is_finite() || !(0.0..=1.0).contains(&v))
                {
                    return Err(Error::Invalid(format!(
                        "soft-area component {v} outside [0, 1]"
                    )));
                }
                let sum: f64 = self.y.iter().sum();
                if (sum - 1.0).abs() > SOFT_SUM_TOL {
                    return Err(Error::Invalid(format!(
                        "soft-area label sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A batch of labels stacked into a `(B, K)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TagBatch<T> {
    y: Array2<T>,
    mode: LabelMode,
}

impl<T: Scalar> TagBatch<T> {
    pub fn from_labels(labels: &[TagLabel]) -> Result<Self> {
        let first = labels
            .first()
            .ok_or_else(|| Error::Invalid("label batch is empty".into()))?;
        let k = first.num_classes();
        let mode = first.mode;
        let mut y = Array2::zeros((labels.len(), k));
        for (i, label) in labels.iter().enumerate() {
            label.validate()?;
            ensure_dim("class", k, label.num_classes())?;
            if label.mode != mode {
                return Err(Error::Invalid("label batch mixes label modes".into()));
            }
            for (j, &v) in label.y.iter().enumerate() {
                y[[i, j]] = T::lit(v);
            }
        }
        Ok(Self { y, mode })
    }

    /// Wraps a raw matrix, validating every row against `mode`.
    pub fn from_array(y: Array2<T>, mode: LabelMode) -> Result<Self> {
        for row in y.rows() {
            TagLabel {
                y: row.iter().map(|v| v.as_f64()).collect(),
                mode,
            }
            .validate()?;
        }
        Ok(Self { y, mode })
    }

    pub fn view(&self) -> ArrayView2<'_, T> {
        self.y.view()
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.y.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.y.ncols()
    }

    /// Rows `indices` of this batch, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            y: self.y.select(Axis(0), indices),
            mode: self.mode,
        }
    }
}

/// Per-pixel categorical distribution over `K` classes, shape `(B, K, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack<T> {
    m: Array4<T>,
}

impl<T: Scalar> MaskStack<T> {
    pub fn new(m: Array4<T>) -> Result<Self> {
        let (b, k, h, w) = m.dim();
        if k < 2 {
            return Err(Error::Invalid(format!("mask needs K >= 2, got {k}")));
        }
        if let Some(v) = m
            .iter()
            .find(|v| !v.is_finite() || **v < T::zero() || **v > T::one())
        {
            return Err(Error::Invalid(format!("mask value {v} outside [0, 1]")));
        }
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let s: f64 = (0..k).map(|c| m[[bi, c, y, x]].as_f64()).sum();
                    if (s - 1.0).abs() > SIMPLEX_TOL {
                        return Err(Error::Invalid(format!(
                            "mask at (b={bi}, h={y}, w={x}) sums to {s}"
                        )));
                    }
                }
            }
        }
        Ok(Self { m })
    }

    /// Wraps a tensor produced by a softmax without re-checking the simplex.
    pub(crate) fn from_softmax(m: Array4<T>) -> Self {
        Self { m }
    }

    pub fn view(&self) -> ArrayView4<'_, T> {
        self.m.view()
    }

    pub fn as_array(&self) -> &Array4<T> {
        &self.m
    }

    pub fn into_inner(self) -> Array4<T> {
        self.m
    }

    pub fn num_classes(&self) -> usize {
        self.m.dim().1
    }
}

/// `K` image-lets per sample, shape `(B, K, 3, H, W)`, unbounded values.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition<T> {
    x: Array5<T>,
}

impl<T: Scalar> Decomposition<T> {
    pub fn new(x: Array5<T>) -> Result<Self> {
        ensure_dim("channel", CHANNELS, x.dim().2)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("decomposition has non-finite values".into()));
        }
        Ok(Self { x })
    }

    pub fn view(&self) -> ArrayView5<'_, T> {
        self.x.view()
    }

    pub fn as_array(&self) -> &Array5<T> {
        &self.x
    }

    pub fn into_inner(self) -> Array5<T> {
        self.x
    }
}

/// Weights of the mask and classifier terms in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_c: f64,
    /// Lower clamp applied to every argument of a logarithm.
    pub eps: f64,
}

impl LossWeights {
    pub const DEFAULT_EPS: f64 = 1e-7;

    pub fn new(lambda_m: f64, lambda_c: f64) -> Result<Self> {
        Self::with_eps(lambda_m, lambda_c, Self::DEFAULT_EPS)
    }

    pub fn with_eps(lambda_m: f64, lambda_c: f64, eps: f64) -> Result<Self> {
        let w = Self {
            lambda_m,
            lambda_c,
            eps,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_m >= 0.0 && self.lambda_m.is_finite()) {
            return Err(Error::Config(format!("lambda_m = {} must be >= 0", self.lambda_m)));
        }
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return Err(Error::Config(format!("lambda_c = {} must be >= 0", self.lambda_c)));
        }
        if !(self.eps > 0.0 && self.eps < 1e-3) {
            return Err(Error::Config(format!("eps = {} must lie in (0, 1e-3)", self.eps)));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    /// Both weights at `1e-3`.
    fn default() -> Self {
        Self {
            lambda_m: 1e-3,
            lambda_c: 1e-3,
            eps: Self::DEFAULT_EPS,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn image_batch_rejects_out_of_range_and_wrong_channels() {
        assert!(ImageBatch::new(Array4::<f64>::from_elem((1, 3, 2, 2), 0.5)).is_ok());
        assert!(ImageBatch::new(Array4::<f64>::from_elem((1, 3, 2, 2), 1.5)).is_err());
        assert!(matches!(
            ImageBatch::new(Array4::<f64>::zeros((1, 4, 2, 2))),
            Err(Error::Dimension { axis: "channel", .. })
        ));
        assert!(ImageBatch::new(Array4::<f64>::zeros((0, 3, 2, 2))).is_err());
    }

    #[test]
    fn indicator_label_requires_background() {
        assert!(TagLabel::indicator(vec![1.0, 1.0]).is_ok());
        assert!(TagLabel::indicator(vec![1.0, 0.0]).is_err());
        assert!(TagLabel::indicator(vec![0.5, 1.0]).is_err());
        assert!(TagLabel::indicator(vec![1.0]).is_err());
        let l = TagLabel::from_present(3, &[1]).unwrap();
        assert_eq!(l.y, vec![0.0, 1.0, 1.0]);
        assert!(l.has_foreground());
        assert!(!TagLabel::from_present(3, &[]).unwrap().has_foreground());
    }

    #[test]
    fn soft_label_must_sum_to_one() {
        assert!(TagLabel::soft_area(vec![0.3, 0.7]).is_ok());
        assert!(TagLabel::soft_area(vec![0.3, 0.6]).is_err());
        assert!(TagLabel::soft_area(vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn mask_stack_checks_simplex() {
        let ok = Array4::<f64>::from_elem((1, 2, 2, 2), 0.5);
        assert!(MaskStack::new(ok).is_ok());
        let bad = Array4::<f64>::from_elem((1, 2, 2, 2), 0.4);
        assert!(MaskStack::new(bad).is_err());
    }

    #[test]
    fn decomposition_rejects_nan() {
        let mut x = Array::<f64, _>::zeros((1, 2, 3, 2, 2));
        assert!(Decomposition::new(x.clone()).is_ok());
        x[[0, 1, 2, 1, 1]] = f64::NAN;
        assert!(Decomposition::new(x).is_err());
    }

    #[test]
    fn loss_weights_bounds() {
        assert!(LossWeights::new(0.0, 0.0).is_ok());
        assert!(LossWeights::new(-1.0, 0.0).is_err());
        assert!(LossWeights::with_eps(1.0, 1.0, 1e-2).is_err());
        assert!(LossWeights::with_eps(1.0, 1.0, 0.0).is_err());
    }
}
