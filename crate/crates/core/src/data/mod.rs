//! Tagged image datasets: on-disk manifests, derivation from class folders,
//! synthetic scenes with ground truth, and batch loading.

pub mod derive;
pub mod loader;
pub mod manifest;
pub mod synth;

pub use derive::{derive_tagged_dataset, DeriveParams};
pub use loader::{load_batches, load_image, load_label_map, load_positions, Batch};
pub use manifest::{disjoint, stratified_split, DatasetManifest, ManifestEntry, Split};
pub use synth::{generate_synthetic, render_scene, ShapeKind, SyntheticSceneParams, Texture};
