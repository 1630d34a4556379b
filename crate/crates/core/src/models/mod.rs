//! The segmentation networks `f_m`/`f_x` and the classifier `g`.

pub mod arch;
pub mod classifier;
pub mod spec;
pub mod unet;

pub use arch::{check_arch, ArchReport, ArchRow};
pub use classifier::{build_classifier, Classifier, ClassifierCache, ClassifierSpec, PRETRAINED_ENV};
pub use spec::{LayerKind, LayerSpec, Layout, ModelSpec, SkipLink};
pub use unet::{Head, Network, PairCache, Segmenter};
