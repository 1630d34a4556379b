//! Sample grids: raw inputs side by side with class-colored overlays.

use image::{Rgb, RgbImage};
use ndarray::{ArrayView3, ArrayView4};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const OVERLAY_ALPHA: f64 = 0.5;
const GUTTER: u32 = 2;

/// Distinct colors for foreground classes; the background is never tinted.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
    [245, 130, 48],
    [240, 50, 230],
];

pub fn class_color(class: usize) -> [u8; 3] {
    PALETTE[class % PALETTE.len()]
}

/// `alpha·color + (1 − alpha)·pixel`, rounded per channel.
pub fn blend(pixel: [u8; 3], color: [u8; 3], alpha: f64) -> [u8; 3] {
    std::array::from_fn(|i| (alpha * color[i] as f64 + (1.0 - alpha) * pixel[i] as f64).round() as u8)
}

/// Converts `(3, H, W)` values in `[0, 1]` to an 8-bit image.
pub fn to_rgb_image<T: Scalar>(img: ArrayView3<'_, T>) -> RgbImage {
    let (_, h, w) = img.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(std::array::from_fn(|c| {
            (img[[c, y as usize, x as usize]].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    })
}

/// Tints every non-background pixel with its class color.
pub fn overlay(image: &RgbImage, labels: ArrayView3<'_, u8>, index: usize, background: u8) -> RgbImage {
    let mut out = image.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let label = labels[[index, y as usize, x as usize]];
        if label != background {
            p.0 = blend(p.0, class_color(label as usize), OVERLAY_ALPHA);
        }
    }
    out
}

/// Picks `n` of `candidates` under `seed`, in selection order.
pub fn select_samples(candidates: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || candidates.is_empty() {
        return Err(Error::Input("no samples selected for the figure".into()));
    }
    if n > candidates.len() {
        return Err(Error::Input(format!(
            "requested {n} samples but only {} are available",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, candidates.len(), n).into_iter().map(|i| candidates[i]).collect())
}

fn tile(cells: &[RgbImage], rows: usize, cols: usize) -> RgbImage {
    let (w, h) = cells[0].dimensions();
    let gw = cols as u32 * (w + GUTTER) + GUTTER;
    let gh = rows as u32 * (h + GUTTER) + GUTTER;
    let mut grid = RgbImage::from_pixel(gw, gh, Rgb([255, 255, 255]));
    for (i, cell) in cells.iter().enumerate() {
        let (r, c) = ((i / cols) as u32, (i % cols) as u32);
        image::imageops::replace(
            &mut grid,
            cell,
            (GUTTER + c * (w + GUTTER)) as i64,
            (GUTTER + r * (h + GUTTER)) as i64,
        );
    }
    grid
}

/// Grids of the selected inputs and of the same inputs with overlays.
///
/// `images` is `(N, 3, H, W)` in `[0, 1]`, `labels` is `(N, H, W)`; the
/// `selection` indexes both, and `layout` must hold every selected sample.
pub fn render_overlay_grid<T: Scalar>(
    images: ArrayView4<'_, T>,
    labels: ArrayView3<'_, u8>,
    selection: &[usize],
    layout: (usize, usize),
    background: u8,
) -> Result<(RgbImage, RgbImage)> {
    if selection.is_empty() {
        return Err(Error::Input("empty figure selection".into()));
    }
    let (rows, cols) = layout;
    if rows * cols < selection.len() {
        return Err(Error::Input(format!(
            "layout {rows}x{cols} cannot hold {} samples",
            selection.len()
        )));
    }
    let mut inputs = Vec::with_capacity(selection.len());
    let mut overlays = Vec::with_capacity(selection.len());
    for &i in selection {
        let img = to_rgb_image(images.index_axis(ndarray::Axis(0), i));
        overlays.push(overlay(&img, labels, i, background));
        inputs.push(img);
    }
    Ok((tile(&inputs, rows, cols), tile(&overlays, rows, cols)))
}

/// Rows and columns for `n` samples, ten per row as in a 5×10 panel.
pub fn default_layout(n: usize) -> (usize, usize) {
    let cols = n.clamp(1, 10);
    (n.div_ceil(cols), cols)
}
