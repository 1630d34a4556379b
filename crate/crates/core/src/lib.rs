//! Weakly supervised semantic segmentation by decomposing an image into
//! per-class masks and image-lets, trained from image-level tags only.

pub mod checkpoint;
pub mod data;
pub mod domain;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nn;
pub mod optim;
pub mod recompose;
pub mod scalar;
pub mod training;

pub use domain::{Decomposition, ImageBatch, LabelMode, LossWeights, MaskStack, TagBatch, TagLabel};
pub use error::{Error, Result};
pub use models::{Classifier, ClassifierSpec, ModelSpec, Segmenter};
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;

pub type Segmenter32 = Segmenter<f32>;
pub type Segmenter64 = Segmenter<f64>;
pub type Classifier32 = Classifier<f32>;
pub type Classifier64 = Classifier<f64>;
pub type ImageBatch32 = ImageBatch<f32>;
pub type ImageBatch64 = ImageBatch<f64>;
