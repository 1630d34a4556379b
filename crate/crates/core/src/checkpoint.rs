//! Run checkpoints: one safetensors archive per network part plus a JSON
//! manifest describing the architecture and training position.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::TensorView;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::classifier::{Classifier, ClassifierSpec};
use crate::models::spec::ModelSpec;
use crate::models::unet::{Segmenter, ENCODER_PREFIX, IMAGE_DECODER_PREFIX, MASK_DECODER_PREFIX};
use crate::nn::ParamStore;
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ENCODER_FILE: &str = "encoder.safetensors";
pub const MASK_DECODER_FILE: &str = "mask_decoder.safetensors";
pub const IMAGE_DECODER_FILE: &str = "image_decoder.safetensors";
pub const CLASSIFIER_FILE: &str = "classifier.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";

/// Writes named tensors to a safetensors file in `T`'s dtype.
pub fn write_tensors<T: Scalar>(path: &Path, tensors: &[(String, ArrayD<T>)]) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(n, t)| {
            let std = t.as_standard_layout();
            (n.clone(), T::to_le_bytes_vec(std.as_slice().expect("standard layout")), t.shape().to_vec())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(n, b, s)| {
            TensorView::new(T::DTYPE, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Tensors(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = safetensors::serialize(views, &None).map_err(|e| Error::Tensors(e.to_string()))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write then rename so an interrupted save never leaves a truncated file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, data).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads every tensor of a safetensors file, converting to `T`.
pub fn read_tensors<T: Scalar>(path: &Path) -> Result<Vec<(String, ArrayD<T>)>> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&data).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (name, view) in st.tensors() {
        let values = T::from_le_bytes_slice(view.data(), view.dtype()).ok_or_else(|| Error::Load {
            path: path.to_path_buf(),
            reason: format!("tensor `{name}` has unsupported dtype {:?}", view.dtype()),
        })?;
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), values).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: format!("tensor `{name}`: {e}"),
        })?;
        out.push((name, arr));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Entries of `store` whose names start with `prefix`, including buffers.
pub fn collect_prefixed<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Vec<(String, ArrayD<T>)> {
    store
        .entries()
        .iter()
        .filter(|e| e.name.starts_with(prefix))
        .map(|e| (e.name.clone(), e.value.clone()))
        .collect()
}

/// Overwrites the entries of `store` under `prefix` from `tensors`.
pub fn restore_prefixed<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    tensors: &[(String, ArrayD<T>)],
) -> Result<()> {
    for e in store.entries_mut().iter_mut().filter(|e| e.name.starts_with(prefix)) {
        let (_, v) = tensors
            .iter()
            .find(|(n, _)| *n == e.name)
            .ok_or_else(|| Error::Tensors(format!("checkpoint lacks `{}`", e.name)))?;
        if v.shape() != e.value.shape() {
            return Err(Error::Tensors(format!(
                "`{}` has shape {:?} in checkpoint, model expects {:?}",
                e.name,
                v.shape(),
                e.value.shape()
            )));
        }
        e.value.assign(v);
    }
    Ok(())
}

const SEGMENTER_PARTS: [(&str, &str); 3] = [
    (ENCODER_FILE, ENCODER_PREFIX),
    (MASK_DECODER_FILE, MASK_DECODER_PREFIX),
    (IMAGE_DECODER_FILE, IMAGE_DECODER_PREFIX),
];

/// Writes the encoder and both decoders as separate archives.
pub fn save_segmenter<T: Scalar>(dir: &Path, seg: &Segmenter<T>) -> Result<()> {
    for (file, prefix) in SEGMENTER_PARTS {
        write_tensors(&dir.join(file), &collect_prefixed(seg.params(), prefix))?;
    }
    Ok(())
}

pub fn load_segmenter<T: Scalar>(dir: &Path, spec: &ModelSpec) -> Result<Segmenter<T>> {
    let mut seg = Segmenter::build(spec, 0)?;
    for (file, prefix) in SEGMENTER_PARTS {
        let tensors = read_tensors(&dir.join(file))?;
        restore_prefixed(seg.params_mut(), prefix, &tensors)?;
    }
    Ok(seg)
}

pub fn save_classifier<T: Scalar>(dir: &Path, g: &Classifier<T>) -> Result<()> {
    write_tensors(&dir.join(CLASSIFIER_FILE), &collect_prefixed(g.params(), ""))
}

pub fn load_classifier<T: Scalar>(dir: &Path, spec: &ClassifierSpec) -> Result<Classifier<T>> {
    let mut g = Classifier::build(spec, 0)?;
    let tensors = read_tensors(&dir.join(CLASSIFIER_FILE))?;
    restore_prefixed(g.params_mut(), "", &tensors)?;
    Ok(g)
}

/// One line per layer: part, row, description, output shape, parameters.
pub fn layer_table(spec: &ModelSpec) -> Result<Vec<String>> {
    let layout = spec.derive_layout()?;
    let mut rows = Vec::new();
    for (part, specs, layouts) in [
        ("encoder", &spec.encoder, &layout.encoder),
        ("mask_decoder", &spec.decoder_mask, &layout.decoder_mask),
        ("image_decoder", &spec.decoder_x, &layout.decoder_x),
    ] {
        for (i, (row, l)) in specs.iter().zip(layouts).enumerate() {
            rows.push(format!(
                "{part}[{i}] {} out={:?} params={}",
                row.describe(),
                l.out_shape,
                l.params
            ));
        }
    }
    Ok(rows)
}

/// Trainable parameter totals per part for the manifest.
pub fn param_counts(spec: &ModelSpec) -> Result<BTreeMap<String, usize>> {
    let layout = spec.derive_layout()?;
    Ok(BTreeMap::from([
        ("encoder".to_string(), layout.encoder_total()),
        ("mask_decoder".to_string(), layout.decoder_mask_total()),
        ("image_decoder".to_string(), layout.decoder_x_total()),
    ]))
}

/// Human-readable description of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// `"classifier"` or `"joint"`.
    pub stage: String,
    pub num_classes: usize,
    pub input_size: (usize, usize),
    pub dtype: String,
    pub model_spec: Option<ModelSpec>,
    pub classifier_spec: Option<ClassifierSpec>,
    /// Trainable parameters per part, e.g. `encoder`, `mask_decoder`.
    pub param_counts: BTreeMap<String, usize>,
    /// One line per layer with its declared output shape and parameter count.
    pub layer_table: Vec<String>,
    pub step: u64,
    pub epoch: usize,
    pub classifier_checksum: Option<String>,
    /// Training configuration and RNG position, owned by the trainer.
    pub training: serde_json::Value,
}

impl CheckpointManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Load {
            path,
            reason: e.to_string(),
        })
    }
}

/// Paths of the files making up a checkpoint directory.
#[derive(Debug, Clone)]
pub struct CheckpointDir(pub PathBuf);

impl CheckpointDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self(path.into())
    }

    pub fn path(&self) -> &Path {
        &self.0
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn manifest(&self) -> Result<CheckpointManifest> {
        CheckpointManifest::read(&self.0)
    }

    pub fn has_classifier(&self) -> bool {
        self.file(CLASSIFIER_FILE).exists() && self.file(MANIFEST_FILE).exists()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn tensors_roundtrip_and_cross_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        let a = arr2(&[[1.5f64, -2.25], [0.1, 3.0]]).into_dyn();
        write_tensors(&path, &[("a".to_string(), a.clone())]).unwrap();
        let back: Vec<(String, ArrayD<f64>)> = read_tensors(&path).unwrap();
        assert_eq!(back[0].1, a);
        let single: Vec<(String, ArrayD<f32>)> = read_tensors(&path).unwrap();
        assert_eq!(single[0].1[[1, 0]], 0.1f32);
    }

    #[test]
    fn missing_file_is_io_error() {
        let r: Result<Vec<(String, ArrayD<f32>)>> = read_tensors(Path::new("/nonexistent/x.safetensors"));
        assert!(matches!(r, Err(Error::Io { .. })));
    }

    #[test]
    fn restore_checks_shapes() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.add("p.w", ArrayD::zeros(IxDyn(&[2])), true);
        let bad = vec![("p.w".to_string(), ArrayD::zeros(IxDyn(&[3])))];
        assert!(restore_prefixed(&mut store, "p.", &bad).is_err());
        let good = vec![("p.w".to_string(), ArrayD::from_elem(IxDyn(&[2]), 4.0f32))];
        restore_prefixed(&mut store, "p.", &good).unwrap();
        assert_eq!(store.entries()[0].value[[1]], 4.0);
    }
}
