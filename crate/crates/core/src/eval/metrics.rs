use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::domain::MaskStack;
use crate::error::{ensure_dim, Error, Result};
use crate::models::Segmenter;
use crate::scalar::Scalar;
use crate::ImageBatch;

/// Per-pixel argmax over classes; ties go to the lowest class index.
pub fn hard_labels<T: Scalar>(mask: &MaskStack<T>) -> Array3<u8> {
    let m = mask.view();
    let (b, k, h, w) = m.dim();
    Array3::from_shape_fn((b, h, w), |(bi, y, x)| {
        let mut best = 0;
        for c in 1..k {
            if m[[bi, c, y, x]] > m[[bi, best, y, x]] {
                best = c;
            }
        }
        best as u8
    })
}

/// Runs the mask network and returns the hard label map with the masks.
pub fn predict_mask<T: Scalar>(f_m: &Segmenter<T>, image: &ImageBatch<T>) -> Result<(Array3<u8>, MaskStack<T>)> {
    let mask = f_m.predict_mask(image)?;
    Ok((hard_labels(&mask), mask))
}

/// Confusion matrix `confusion[truth][pred]` between two label maps.
pub fn confusion_matrix(pred: ArrayView3<'_, u8>, truth: ArrayView3<'_, u8>, k: usize) -> Result<Array2<u64>> {
    let (pb, ph, pw) = pred.dim();
    let (tb, th, tw) = truth.dim();
    ensure_dim("batch", tb, pb)?;
    ensure_dim("height", th, ph)?;
    ensure_dim("width", tw, pw)?;
    let mut conf = Array2::zeros((k, k));
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        let (p, t) = (p as usize, t as usize);
        if p >= k || t >= k {
            return Err(Error::Input(format!("label {} out of range for K = {k}", p.max(t))));
        }
        conf[[t, p]] += 1;
    }
    Ok(conf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    /// IoU per class; `None` for classes absent from both maps.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
    pub per_class_precision: Vec<Option<f64>>,
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
}

impl SegMetrics {
    pub fn from_confusion(conf: &Array2<u64>) -> Self {
        let k = conf.nrows();
        let total: u64 = conf.sum();
        let diag: u64 = (0..k).map(|c| conf[[c, c]]).sum();
        let mut iou = Vec::with_capacity(k);
        let mut precision = Vec::with_capacity(k);
        let mut recall = Vec::with_capacity(k);
        for c in 0..k {
            let tp = conf[[c, c]];
            let truth_total: u64 = conf.row(c).sum();
            let pred_total: u64 = conf.column(c).sum();
            let union = truth_total + pred_total - tp;
            let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
            iou.push(ratio(tp, union));
            precision.push(ratio(tp, pred_total));
            recall.push(ratio(tp, truth_total));
        }
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let mean_iou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        Self {
            per_class_iou: iou,
            mean_iou,
            pixel_accuracy: if total > 0 { diag as f64 / total as f64 } else { 0.0 },
            per_class_precision: precision,
            per_class_recall: recall,
            confusion: conf.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.per_class_iou.len()
    }
}

/// Segmentation metrics of `pred` against `truth` with `k` classes.
pub fn compute_metrics(pred: ArrayView3<'_, u8>, truth: ArrayView3<'_, u8>, k: usize) -> Result<SegMetrics> {
    Ok(SegMetrics::from_confusion(&confusion_matrix(pred, truth, k)?))
}

/// Fraction of pixels of each image labeled as any foreground class.
pub fn foreground_fraction(labels: ArrayView3<'_, u8>, background: u8) -> Vec<f64> {
    labels
        .outer_iter()
        .map(|img| img.iter().filter(|&&v| v != background).count() as f64 / img.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn tie_goes_to_lowest_index() {
        let m = MaskStack::new(Array4::<f64>::from_elem((1, 2, 2, 2), 0.5)).unwrap();
        assert!(hard_labels(&m).iter().all(|&v| v == 0));
    }

    #[test]
    fn confident_class_zero_everywhere() {
        let mut a = Array4::<f64>::from_elem((1, 2, 3, 3), 0.1);
        a.slice_mut(ndarray::s![.., 0, .., ..]).fill(0.9);
        let m = MaskStack::new(a).unwrap();
        assert!(hard_labels(&m).iter().all(|&v| v == 0));
    }

    #[test]
    fn hand_counted_iou() {
        // Class 1 truth: 6 pixels; prediction: 6 pixels; overlap 4.
        let truth = ndarray::arr2(&[[1u8, 1, 1, 0], [1, 1, 1, 0], [0, 0, 0, 0], [0, 0, 0, 0]]);
        let pred = ndarray::arr2(&[[0u8, 1, 1, 1], [0, 1, 1, 1], [0, 0, 0, 0], [0, 0, 0, 0]]);
        let m = compute_metrics(
            pred.insert_axis(ndarray::Axis(0)).view(),
            truth.insert_axis(ndarray::Axis(0)).view(),
            2,
        )
        .unwrap();
        assert_eq!(m.confusion[1][1], 4);
        assert_eq!(m.confusion[0][1], 2);
        assert_eq!(m.confusion[1][0], 2);
        assert_eq!(m.per_class_iou[1], Some(0.5));
    }

    #[test]
    fn absent_class_excluded_from_mean() {
        let a = Array3::<u8>::zeros((1, 2, 2));
        let m = compute_metrics(a.view(), a.view(), 3).unwrap();
        assert_eq!(m.per_class_iou, vec![Some(1.0), None, None]);
        assert_eq!(m.mean_iou, 1.0);
    }

    #[test]
    fn out_of_range_label_is_input_error() {
        let a = Array3::<u8>::from_elem((1, 1, 1), 2);
        assert!(matches!(compute_metrics(a.view(), a.view(), 2), Err(Error::Input(_))));
    }
}
