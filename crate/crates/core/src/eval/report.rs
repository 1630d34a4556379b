use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::metrics::{confusion_matrix, foreground_fraction, hard_labels, SegMetrics};
use super::overlay::{default_layout, render_overlay_grid, select_samples};
use crate::checkpoint::{self, CheckpointDir};
use crate::data::{load_batches, DatasetManifest};
use crate::error::{Error, Result};
use crate::models::{Classifier, Segmenter};

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub out_dir: PathBuf,
    pub run_id: String,
    pub seed: u64,
    /// Samples per population figure.
    pub figure_samples: usize,
    /// Foreground area, as a fraction of pixels, above which an image
    /// without foreground counts as a false positive.
    pub fp_area_threshold: f64,
    pub batch_size: usize,
    pub write_figures: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("eval"),
            run_id: "run".into(),
            seed: 0,
            figure_samples: 50,
            fp_area_threshold: 0.01,
            batch_size: 16,
            write_figures: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub split: String,
    pub num_images: usize,
    pub num_present: usize,
    pub num_absent: usize,
    /// Present only when every image has a ground-truth mask.
    pub seg_metrics: Option<SegMetrics>,
    /// Set when some requested metric could not be computed.
    pub partial: bool,
    pub missing: Vec<String>,
    /// Tags implied by the predicted masks (class area above the threshold)
    /// compared with the true tags, exact match per image.
    pub mask_tag_accuracy: f64,
    pub classifier_tag_accuracy: Option<f64>,
    pub fp_area_threshold: f64,
    pub absent_false_positive_rate: Option<f64>,
    pub absent_mean_foreground_area: Option<f64>,
    pub present_mean_foreground_area: Option<f64>,
    pub figures: Vec<PathBuf>,
}

impl EvalReport {
    /// IoU of foreground class `c`, if defined.
    pub fn class_iou(&self, c: usize) -> Option<f64> {
        self.seg_metrics.as_ref().and_then(|m| m.per_class_iou.get(c).copied().flatten())
    }

    /// Plain-text summary with a per-class table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "run {} split {} images {} (present {}, absent {})", self.run_id, self.split, self.num_images, self.num_present, self.num_absent);
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        match &self.seg_metrics {
            Some(m) => {
                let _ = writeln!(s, "mean IoU {:.4}  pixel accuracy {:.4}", m.mean_iou, m.pixel_accuracy);
                let _ = writeln!(s, "{:<8} {:>8} {:>10} {:>8}", "class", "IoU", "precision", "recall");
                for c in 0..m.num_classes() {
                    let name = if c + 1 == m.num_classes() { "bg".to_string() } else { c.to_string() };
                    let _ = writeln!(
                        s,
                        "{:<8} {:>8} {:>10} {:>8}",
                        name,
                        fmt(m.per_class_iou[c]),
                        fmt(m.per_class_precision[c]),
                        fmt(m.per_class_recall[c])
                    );
                }
            }
            None => {
                let _ = writeln!(s, "segmentation metrics unavailable: {}", self.missing.join("; "));
            }
        }
        let _ = writeln!(s, "mask tag accuracy {:.4}", self.mask_tag_accuracy);
        let _ = writeln!(s, "classifier tag accuracy {}", fmt(self.classifier_tag_accuracy));
        let _ = writeln!(
            s,
            "absent images: false-positive rate {} (area > {:.1}%), mean foreground area {}",
            fmt(self.absent_false_positive_rate),
            self.fp_area_threshold * 100.0,
            fmt(self.absent_mean_foreground_area)
        );
        let _ = writeln!(s, "present images: mean foreground area {}", fmt(self.present_mean_foreground_area));
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("metrics.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("metrics.txt");
        fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))
    }
}

/// Fraction of rows where thresholded predictions match the 0/1 targets.
fn exact_match_accuracy(pred: &Array2<bool>, truth: &Array2<bool>) -> f64 {
    let hits = pred
        .outer_iter()
        .zip(truth.outer_iter())
        .filter(|(p, t)| p == t)
        .count();
    hits as f64 / pred.nrows().max(1) as f64
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluates in-memory models on a manifest.
pub fn evaluate_segmenter(
    seg: &Segmenter<f32>,
    classifier: Option<&Classifier<f32>>,
    manifest: &DatasetManifest,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::Input("manifest has no entries".into()));
    }
    let k = manifest.num_classes;
    if seg.num_classes() != k {
        return Err(Error::Input(format!(
            "model has K = {}, manifest K = {k}",
            seg.num_classes()
        )));
    }
    let background = (k - 1) as u8;
    let (h, w) = manifest.image_size;
    let n = manifest.len();
    let (present_pos, absent_pos) = manifest.populations();

    let pick = |pop: &[usize], salt: u64| -> Option<Vec<usize>> {
        let m = opts.figure_samples.min(pop.len());
        (opts.write_figures && m > 0).then(|| select_samples(pop, m, opts.seed ^ salt).expect("nonempty population"))
    };
    let figure_sets = [("present", pick(&present_pos, 0)), ("absent", pick(&absent_pos, 1))];
    let keep: std::collections::BTreeSet<usize> = figure_sets
        .iter()
        .filter_map(|(_, s)| s.as_ref())
        .flatten()
        .copied()
        .collect();
    let slot = |p: usize| keep.iter().position(|&q| q == p);
    let mut kept_images = Array4::<f32>::zeros((keep.len(), 3, h, w));
    let mut kept_labels = Array3::<u8>::zeros((keep.len(), h, w));

    let with_masks = manifest.has_masks();
    let mut confusion = Array2::<u64>::zeros((k, k));
    let mut fg_area = vec![0.0; n];
    let mut mask_pred = Array2::from_elem((n, k - 1), false);
    let mut truth = Array2::from_elem((n, k - 1), false);
    let mut cls_pred = classifier.map(|_| Array2::from_elem((n, k - 1), false));

    for batch in load_batches::<f32>(manifest, opts.batch_size, false, 0)? {
        let batch = batch?;
        let labels = hard_labels(&seg.predict_mask(&batch.images)?);
        if let Some(truth_maps) = &batch.masks {
            confusion += &confusion_matrix(labels.view(), truth_maps.view(), k)?;
        }
        let fractions = foreground_fraction(labels.view(), background);
        let scores = match classifier {
            Some(g) => Some(g.predict(batch.images.view())?),
            None => None,
        };
        for (i, &p) in batch.positions.iter().enumerate() {
            fg_area[p] = fractions[i];
            let img_labels = labels.index_axis(Axis(0), i);
            let pixels = img_labels.len() as f64;
            for c in 0..k - 1 {
                let area = img_labels.iter().filter(|&&v| v as usize == c).count() as f64 / pixels;
                mask_pred[[p, c]] = area > opts.fp_area_threshold;
                truth[[p, c]] = manifest.entries[p].tags.y[c] > 0.0;
                if let (Some(s), Some(cp)) = (&scores, cls_pred.as_mut()) {
                    cp[[p, c]] = s[[i, c]] > 0.5;
                }
            }
            if let Some(j) = slot(p) {
                kept_images.index_axis_mut(Axis(0), j).assign(&batch.images.view().index_axis(Axis(0), i));
                kept_labels.index_axis_mut(Axis(0), j).assign(&img_labels);
            }
        }
    }

    let mut missing = Vec::new();
    if !with_masks {
        missing.push("ground-truth masks absent from manifest; IoU not computed".to_string());
    }
    if classifier.is_none() {
        missing.push("no classifier in checkpoint; classifier tag accuracy not computed".to_string());
    }
    let absent_areas: Vec<f64> = absent_pos.iter().map(|&p| fg_area[p]).collect();
    let present_areas: Vec<f64> = present_pos.iter().map(|&p| fg_area[p]).collect();

    let mut figures = Vec::new();
    if opts.write_figures {
        fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
        for (population, selection) in &figure_sets {
            let Some(selection) = selection else { continue };
            let local: Vec<usize> = selection.iter().map(|&p| slot(p).expect("kept sample")).collect();
            let (inputs, overlays) = render_overlay_grid(
                kept_images.view(),
                kept_labels.view(),
                &local,
                default_layout(local.len()),
                background,
            )?;
            for (kind, img) in [("inputs", inputs), ("overlay", overlays)] {
                let path = opts.out_dir.join(format!("{}_{}_{population}_{kind}.png", opts.run_id, manifest.split));
                img.save(&path)?;
                figures.push(path);
            }
        }
    }

    Ok(EvalReport {
        run_id: opts.run_id.clone(),
        split: manifest.split.to_string(),
        num_images: n,
        num_present: present_pos.len(),
        num_absent: absent_pos.len(),
        seg_metrics: with_masks.then(|| SegMetrics::from_confusion(&confusion)),
        partial: !missing.is_empty(),
        missing,
        mask_tag_accuracy: exact_match_accuracy(&mask_pred, &truth),
        classifier_tag_accuracy: cls_pred.map(|p| exact_match_accuracy(&p, &truth)),
        fp_area_threshold: opts.fp_area_threshold,
        absent_false_positive_rate: mean(
            &absent_areas
                .iter()
                .map(|&a| if a > opts.fp_area_threshold { 1.0 } else { 0.0 })
                .collect::<Vec<_>>(),
        ),
        absent_mean_foreground_area: mean(&absent_areas),
        present_mean_foreground_area: mean(&present_areas),
        figures,
    })
}

/// Loads a checkpoint and evaluates it, writing `metrics.json`,
/// `metrics.txt` and the figures into `opts.out_dir`.
pub fn evaluate_run(checkpoint_dir: &Path, manifest: &DatasetManifest, opts: &EvalOptions) -> Result<EvalReport> {
    let dir = CheckpointDir::new(checkpoint_dir);
    let meta = dir.manifest()?;
    let spec = meta.model_spec.as_ref().ok_or_else(|| {
        Error::Input(format!(
            "{} holds no segmentation model (stage `{}`)",
            checkpoint_dir.display(),
            meta.stage
        ))
    })?;
    let seg = checkpoint::load_segmenter::<f32>(checkpoint_dir, spec)?;
    let classifier = match (&meta.classifier_spec, dir.has_classifier()) {
        (Some(cs), true) => Some(checkpoint::load_classifier::<f32>(checkpoint_dir, cs)?),
        _ => None,
    };
    let report = evaluate_segmenter(&seg, classifier.as_ref(), manifest, opts)?;
    report.write(&opts.out_dir)?;
    Ok(report)
}
