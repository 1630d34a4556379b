//! Mask-weighted recomposition of image-lets.
//!
//! `recon[b,c,h,w] = Σ_k m[b,k,h,w] · x[b,k,c,h,w]`, and the per-class terms
//! of that sum (`component_images`). The `*_raw` variants accept arbitrary
//! tensors so bilinearity can be exercised off the simplex.

use ndarray::{Array2, Array4, Array5, ArrayView4, ArrayView5, Axis};

use crate::domain::{Decomposition, MaskStack};
use crate::error::{ensure_dim, Result};
use crate::scalar::Scalar;

fn check_pair<T>(m: &ArrayView4<'_, T>, x: &ArrayView5<'_, T>) -> Result<()> {
    let (b, k, h, w) = m.dim();
    let (xb, xk, _, xh, xw) = x.dim();
    ensure_dim("batch", b, xb)?;
    ensure_dim("class", k, xk)?;
    ensure_dim("height", h, xh)?;
    ensure_dim("width", w, xw)
}

pub fn recompose_raw<T: Scalar>(m: ArrayView4<'_, T>, x: ArrayView5<'_, T>) -> Result<Array4<T>> {
    check_pair(&m, &x)?;
    let (b, k, h, w) = m.dim();
    let c = x.dim().2;
    let mut out = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ki in 0..k {
            let mk = m.slice(ndarray::s![bi, ki, .., ..]);
            for ci in 0..c {
                let xk = x.slice(ndarray::s![bi, ki, ci, .., ..]);
                let mut o = out.slice_mut(ndarray::s![bi, ci, .., ..]);
                ndarray::Zip::from(&mut o)
                    .and(&mk)
                    .and(&xk)
                    .for_each(|o, &mv, &xv| *o += mv * xv);
            }
        }
    }
    Ok(out)
}

/// Reconstruction `Î` of the input from masks and image-lets.
pub fn recompose<T: Scalar>(m: &MaskStack<T>, x: &Decomposition<T>) -> Result<Array4<T>> {
    recompose_raw(m.view(), x.view())
}

pub fn component_images_raw<T: Scalar>(
    m: ArrayView4<'_, T>,
    x: ArrayView5<'_, T>,
) -> Result<Array5<T>> {
    check_pair(&m, &x)?;
    let mb = m.insert_axis(Axis(2));
    Ok(&x * &mb.broadcast(x.dim()).expect("broadcast over channel axis"))
}

/// Per-class contributions `Î_k = M_k ⊙ X_k`, shape `(B, K, C, H, W)`.
pub fn component_images<T: Scalar>(m: &MaskStack<T>, x: &Decomposition<T>) -> Result<Array5<T>> {
    component_images_raw(m.view(), x.view())
}

/// Mean of each mask-let over its pixels, shape `(B, K)`.
pub fn average_mask_score<T: Scalar>(m: &MaskStack<T>) -> Array2<T> {
    average_mask_score_raw(m.view())
}

pub fn average_mask_score_raw<T: Scalar>(m: ArrayView4<'_, T>) -> Array2<T> {
    let (b, k, h, w) = m.dim();
    let inv = T::one() / T::lit((h * w) as f64);
    let mut out = Array2::zeros((b, k));
    for bi in 0..b {
        for ki in 0..k {
            out[[bi, ki]] = m.slice(ndarray::s![bi, ki, .., ..]).sum() * inv;
        }
    }
    out
}

/// Pulls a gradient on component images back to the masks and image-lets.
///
/// Returns `(dL/dm, dL/dx)` for `Î_k = m_k · x_k`.
pub(crate) fn component_images_backward<T: Scalar>(
    m: ArrayView4<'_, T>,
    x: ArrayView5<'_, T>,
    d_comp: ArrayView5<'_, T>,
) -> (Array4<T>, Array5<T>) {
    let mb = m.insert_axis(Axis(2));
    let dx = &d_comp * &mb.broadcast(x.dim()).expect("broadcast over channel axis");
    let dm = (&d_comp * &x).sum_axis(Axis(2));
    (dm, dx)
}

/// Pulls a gradient on the reconstruction back to the masks and image-lets.
pub(crate) fn recompose_backward<T: Scalar>(
    m: ArrayView4<'_, T>,
    x: ArrayView5<'_, T>,
    d_recon: ArrayView4<'_, T>,
) -> (Array4<T>, Array5<T>) {
    let k = m.dim().1;
    let dr = d_recon.insert_axis(Axis(1));
    let d_comp = dr
        .broadcast((dr.dim().0, k, dr.dim().2, dr.dim().3, dr.dim().4))
        .expect("broadcast over class axis");
    component_images_backward(m, x, d_comp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use ndarray::{Array, Array4, Array5};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_simplex(rng: &mut ChaCha8Rng, b: usize, k: usize, h: usize, w: usize) -> Array4<f64> {
        let mut m = Array4::from_shape_fn((b, k, h, w), |_| rng.random_range(0.01..1.0));
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let s: f64 = (0..k).map(|c| m[[bi, c, y, x]]).sum();
                    for c in 0..k {
                        m[[bi, c, y, x]] /= s;
                    }
                }
            }
        }
        m
    }

    #[test]
    fn one_hot_mask_selects_image_let() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array5::from_shape_fn((2, 3, 3, 4, 4), |_| rng.random_range(-2.0..2.0));
        let mut m = Array4::<f64>::zeros((2, 3, 4, 4));
        m.slice_mut(ndarray::s![.., 1, .., ..]).fill(1.0);
        let m = MaskStack::new(m).unwrap();
        let x = Decomposition::new(x).unwrap();
        let r = recompose(&m, &x).unwrap();
        assert_eq!(r, x.as_array().slice(ndarray::s![.., 1, .., .., ..]));
        let comp = component_images(&m, &x).unwrap();
        assert_eq!(
            comp.slice(ndarray::s![.., 1, .., .., ..]),
            x.as_array().slice(ndarray::s![.., 1, .., .., ..])
        );
        assert!(comp.slice(ndarray::s![.., 0, .., .., ..]).iter().all(|&v| v == 0.0));
        assert!(comp.slice(ndarray::s![.., 2, .., .., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convex_midpoint() {
        let m = MaskStack::new(Array4::<f64>::from_elem((1, 2, 3, 3), 0.5)).unwrap();
        let mut x = Array5::<f64>::zeros((1, 2, 3, 3, 3));
        x.slice_mut(ndarray::s![.., 1, .., .., ..]).fill(1.0);
        let r = recompose(&m, &Decomposition::new(x).unwrap()).unwrap();
        assert!(r.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_mask_annihilates_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array5::from_shape_fn((1, 2, 3, 2, 2), |_| rng.random_range(-5.0..5.0));
        let m = Array4::<f64>::zeros((1, 2, 2, 2));
        let comp = component_images_raw(m.view(), x.view()).unwrap();
        assert!(comp.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_image_lets_reproduce_the_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Array4::from_shape_fn((2, 3, 3, 3), |_| rng.random_range(0.0..1.0));
        let m = random_simplex(&mut rng, 2, 3, 3, 3);
        let x = Array5::from_shape_fn((2, 3, 3, 3, 3), |(b, _, c, h, w)| img[[b, c, h, w]]);
        let r = recompose_raw(m.view(), x.view()).unwrap();
        for (a, b) in r.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn average_score_hand_sum() {
        let mut m = Array4::<f64>::zeros((1, 2, 2, 2));
        let v = [0.1, 0.2, 0.3, 0.4];
        for (i, &p) in v.iter().enumerate() {
            m[[0, 0, i / 2, i % 2]] = p;
            m[[0, 1, i / 2, i % 2]] = 1.0 - p;
        }
        let s = average_mask_score(&MaskStack::new(m).unwrap());
        assert!((s[[0, 0]] - 0.25).abs() < 1e-15);
        assert!((s[[0, 1]] - 0.75).abs() < 1e-15);

        let uniform = MaskStack::new(Array4::<f64>::from_elem((1, 4, 3, 3), 0.25)).unwrap();
        assert!(average_mask_score(&uniform).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn shape_mismatch_names_axis() {
        let m = Array4::<f64>::zeros((1, 2, 4, 4));
        let x = Array5::<f64>::zeros((1, 2, 3, 4, 5));
        match recompose_raw(m.view(), x.view()) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "width"),
            other => panic!("unexpected {other:?}"),
        }
        let x = Array5::<f64>::zeros((1, 3, 3, 4, 4));
        assert!(matches!(
            component_images_raw(m.view(), x.view()),
            Err(Error::Dimension { axis: "class", .. })
        ));
    }

    #[test]
    fn bilinear_in_the_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Array::from_shape_fn((1, 3, 3, 3), |_| rng.random_range(-1.0..1.0));
        let x = Array::from_shape_fn((1, 3, 3, 3, 3), |_| rng.random_range(-1.0..1.0));
        let a = 2.5;
        let lhs = recompose_raw((&m * a).view(), x.view()).unwrap();
        let rhs: Array4<f64> = recompose_raw(m.view(), x.view()).unwrap() * a;
        for (l, r) in lhs.iter().zip(rhs.iter()) {
            assert!((l - r).abs() < 1e-12);
        }
    }
}
