//! Inference, segmentation metrics and overlay figures.

pub mod metrics;
pub mod overlay;
pub mod report;

pub use metrics::{compute_metrics, confusion_matrix, foreground_fraction, hard_labels, predict_mask, SegMetrics};
pub use overlay::{blend, default_layout, overlay, render_overlay_grid, select_samples, to_rgb_image, OVERLAY_ALPHA};
pub use report::{evaluate_run, evaluate_segmenter, EvalOptions, EvalReport};
