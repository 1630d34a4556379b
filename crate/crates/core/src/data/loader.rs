use std::path::Path;

use image::imageops::FilterType;
use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::DatasetManifest;
use crate::domain::{ImageBatch, TagBatch, TagLabel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Reads an RGB image as `(3, H, W)` in `[0, 1]`, resizing bilinearly when
/// its size differs from `size`.
pub fn load_image<T: Scalar>(path: &Path, size: (usize, usize)) -> Result<Array3<T>> {
    let img = image::open(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (h, w) = size;
    let img = if (img.height() as usize, img.width() as usize) == (h, w) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    };
    let inv = T::lit(1.0 / 255.0);
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        T::lit(img.get_pixel(x as u32, y as u32).0[c] as f64) * inv
    }))
}

/// Reads a single-channel label map; every value must be below `num_classes`.
pub fn load_label_map(path: &Path, num_classes: usize) -> Result<ndarray::Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let map = ndarray::Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .expect("luma buffer matches its dimensions");
    if let Some(&v) = map.iter().find(|&&v| v as usize >= num_classes) {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: format!("label {v} out of range for K = {num_classes}"),
        });
    }
    Ok(map)
}

/// Visiting order of `n` entries for one pass.
pub fn epoch_order(n: usize, shuffle: bool, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// Positions of the samples in the manifest's entry list.
    pub positions: Vec<usize>,
    /// The entries' own `index` fields, for diagnostics.
    pub indices: Vec<usize>,
    pub images: ImageBatch<T>,
    pub tags: TagBatch<T>,
    /// Ground-truth label maps `(B, H, W)` when every sample has one.
    pub masks: Option<Array3<u8>>,
}

/// Iterator over the batches of one pass through a manifest.
pub struct BatchIter<'a, T> {
    manifest: &'a DatasetManifest,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let positions = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(load_positions(self.manifest, &positions))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl<T: Scalar> ExactSizeIterator for BatchIter<'_, T> {}

/// Loads the given manifest positions as one batch.
pub fn load_positions<T: Scalar>(manifest: &DatasetManifest, positions: &[usize]) -> Result<Batch<T>> {
    let (h, w) = manifest.image_size;
    let b = positions.len();
    let mut images = Array4::zeros((b, 3, h, w));
    let mut labels: Vec<TagLabel> = Vec::with_capacity(b);
    let with_masks = positions.iter().all(|&p| manifest.entries[p].mask.is_some());
    let mut masks = with_masks.then(|| Array3::zeros((b, h, w)));
    for (i, &p) in positions.iter().enumerate() {
        let entry = &manifest.entries[p];
        images
            .slice_mut(ndarray::s![i, .., .., ..])
            .assign(&load_image::<T>(&manifest.image_path(entry), (h, w))?);
        labels.push(entry.tags.clone());
        if let (Some(masks), Some(path)) = (masks.as_mut(), manifest.mask_path(entry)) {
            let map = load_label_map(&path, manifest.num_classes)?;
            if map.dim() != (h, w) {
                return Err(Error::Load {
                    path,
                    reason: format!("mask is {:?}, expected {:?}", map.dim(), (h, w)),
                });
            }
            masks.slice_mut(ndarray::s![i, .., ..]).assign(&map);
        }
    }
    Ok(Batch {
        positions: positions.to_vec(),
        indices: positions.iter().map(|&p| manifest.entries[p].index).collect(),
        images: ImageBatch::new(images)?,
        tags: TagBatch::from_labels(&labels)?,
        masks,
    })
}

/// Batches of `batch_size` in manifest order, or shuffled under `seed`; the
/// last batch may be smaller.
pub fn load_batches<T: Scalar>(
    manifest: &DatasetManifest,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<BatchIter<'_, T>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(BatchIter {
        manifest,
        order: epoch_order(manifest.len(), shuffle, seed),
        batch_size,
        cursor: 0,
        _marker: std::marker::PhantomData,
    })
}
