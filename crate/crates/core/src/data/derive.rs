//! Tagged dataset from two folders: images containing the object class and
//! images that do not.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{stratified_split, DatasetManifest, ManifestEntry, Split};
use crate::domain::TagLabel;
use crate::error::{Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone)]
pub struct DeriveParams {
    pub n_pos: usize,
    pub n_neg: usize,
    pub size: (usize, usize),
    pub split_ratio: f64,
    pub seed: u64,
}

/// Raster files directly under `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Samples `n_pos` positives tagged `(1, 1)` and `n_neg` negatives tagged
/// `(0, 1)`, resizes them into `out_dir/images`, and writes
/// `train.jsonl` / `val.jsonl` next to them.
pub fn derive_tagged_dataset(
    positive_dir: &Path,
    negative_dir: &Path,
    params: &DeriveParams,
    out_dir: &Path,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let (h, w) = params.size;
    if h == 0 || w == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    let mut pos = list_images(positive_dir)?;
    let mut neg = list_images(negative_dir)?;
    if pos.len() < params.n_pos || neg.len() < params.n_neg {
        return Err(Error::Resource(format!(
            "need {} positive and {} negative images, found {} in {} and {} in {}",
            params.n_pos,
            params.n_neg,
            pos.len(),
            positive_dir.display(),
            neg.len(),
            negative_dir.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut entries = Vec::with_capacity(params.n_pos + params.n_neg);
    let chosen = pos[..params.n_pos]
        .iter()
        .map(|p| (p, true))
        .chain(neg[..params.n_neg].iter().map(|p| (p, false)));
    for (index, (src, positive)) in chosen.enumerate() {
        let img = image::open(src).map_err(|e| Error::Load {
            path: src.clone(),
            reason: e.to_string(),
        })?;
        let resized = image::imageops::resize(&img.to_rgb8(), w as u32, h as u32, FilterType::Triangle);
        let rel = PathBuf::from("images").join(format!("{index:06}.png"));
        let dst = out_dir.join(&rel);
        resized.save(&dst)?;
        let tags = TagLabel::indicator(vec![if positive { 1.0 } else { 0.0 }, 1.0])?;
        entries.push(ManifestEntry {
            index,
            image: rel,
            tags,
            mask: None,
        });
    }
    let pool = DatasetManifest {
        split: Split::All,
        num_classes: 2,
        image_size: params.size,
        seed: params.seed,
        root: out_dir.to_path_buf(),
        entries,
    };
    let (train, val) = stratified_split(&pool, params.split_ratio, &mut rng)?;
    train.write(&out_dir.join("train.jsonl"))?;
    val.write(&out_dir.join("val.jsonl"))?;
    Ok((train, val))
}
