//! 2-D convolution lowered to a matrix product over an im2col buffer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, Axis, IxDyn};
use rand::Rng;

use super::init::Init;
use super::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Square-kernel convolution with symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = init.sample(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ndarray::ArrayD::zeros(IxDyn(&[out_channels])),
                true,
            )
        });
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Trainable scalars: `c_out · c_in · k² (+ c_out)`.
    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn geometry<T>(&self, x: &Array4<T>) -> Geometry {
        let (b, c, h, w) = x.dim();
        assert_eq!(
            c, self.in_channels,
            "conv expects {} input channels, got {c}",
            self.in_channels
        );
        let (ho, wo) = self.output_hw(h, w);
        Geometry { b, c, h, w, ho, wo }
    }

    fn weight_matrix<'a, T: Scalar>(&self, store: &'a ParamStore<T>) -> ArrayView2<'a, T> {
        store
            .get(self.weight)
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .expect("contiguous conv weight")
    }

    /// For kernel offset `koff`, the output columns whose input index
    /// `o·stride + koff − padding` falls inside `[0, len)`.
    fn valid_range(&self, koff: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.padding;
        let lo = if koff >= p { 0 } else { (p - koff).div_ceil(s) };
        // o·s + koff − p ≤ len − 1  ⇔  o ≤ (len − 1 + p − koff) / s
        let hi = if len + p > koff {
            ((len - 1 + p - koff) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col<T: Scalar>(&self, x: &[T], g: Geometry) -> Array2<T> {
        let k = self.kernel;
        let s = self.stride;
        let p = self.padding;
        let rows = g.c * k * k;
        let plane = g.ho * g.wo;
        let cols = g.b * plane;
        let mut col = vec![T::zero(); rows * cols];
        for ci in 0..g.c {
            for ky in 0..k {
                let (y0, y1) = self.valid_range(ky, g.h, g.ho);
                for kx in 0..k {
                    let (x0, x1) = self.valid_range(kx, g.w, g.wo);
                    let r = (ci * k + ky) * k + kx;
                    let row = &mut col[r * cols..(r + 1) * cols];
                    for bi in 0..g.b {
                        let src = &x[(bi * g.c + ci) * g.h * g.w..(bi * g.c + ci + 1) * g.h * g.w];
                        let dst = &mut row[bi * plane..(bi + 1) * plane];
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let srow = &src[iy * g.w..(iy + 1) * g.w];
                            let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                            if s == 1 {
                                let start = x0 + kx - p;
                                drow[x0..x1].copy_from_slice(&srow[start..start + (x1 - x0)]);
                            } else {
                                for ox in x0..x1 {
                                    drow[ox] = srow[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((rows, cols), col).expect("im2col shape")
    }

    fn col2im<T: Scalar>(&self, col: &Array2<T>, g: Geometry) -> Array4<T> {
        let k = self.kernel;
        let s = self.stride;
        let p = self.padding;
        let plane = g.ho * g.wo;
        let cols = g.b * plane;
        let col = col.as_slice().expect("contiguous column buffer");
        let mut dx = vec![T::zero(); g.b * g.c * g.h * g.w];
        for ci in 0..g.c {
            for ky in 0..k {
                let (y0, y1) = self.valid_range(ky, g.h, g.ho);
                for kx in 0..k {
                    let (x0, x1) = self.valid_range(kx, g.w, g.wo);
                    let r = (ci * k + ky) * k + kx;
                    let row = &col[r * cols..(r + 1) * cols];
                    for bi in 0..g.b {
                        let base = (bi * g.c + ci) * g.h * g.w;
                        let dst = &mut dx[base..base + g.h * g.w];
                        let src = &row[bi * plane..(bi + 1) * plane];
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                            let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                            for ox in x0..x1 {
                                drow[ox * s + kx - p] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
        Array4::from_shape_vec((g.b, g.c, g.h, g.w), dx).expect("col2im shape")
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Array4<T>) -> Array4<T> {
        let g = self.geometry(x);
        let xs = x.as_standard_layout();
        let col = self.im2col(xs.as_slice().expect("standard layout"), g);
        let plane = g.ho * g.wo;
        let mut y = Array2::<T>::zeros((self.out_channels, g.b * plane));
        general_mat_mul(T::one(), &self.weight_matrix(store), &col, T::zero(), &mut y);
        let bias = self.bias.map(|id| store.get(id));
        let ys = y.as_slice().expect("contiguous product");
        let mut out = vec![T::zero(); g.b * self.out_channels * plane];
        for bi in 0..g.b {
            for co in 0..self.out_channels {
                let src = &ys[co * g.b * plane + bi * plane..co * g.b * plane + (bi + 1) * plane];
                let dst = &mut out[(bi * self.out_channels + co) * plane..][..plane];
                match bias {
                    Some(bv) => {
                        let bc = bv[co];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s + bc;
                        }
                    }
                    None => dst.copy_from_slice(src),
                }
            }
        }
        Array4::from_shape_vec((g.b, self.out_channels, g.ho, g.wo), out).expect("conv output")
    }

    /// Returns `dL/dx`; accumulates weight and bias gradients when `grads` is given.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Array4<T>,
        dy: &Array4<T>,
        grads: Option<&mut Gradients<T>>,
    ) -> Array4<T> {
        let g = self.geometry(x);
        let plane = g.ho * g.wo;
        let dys = dy.as_standard_layout();
        let dys = dys.as_slice().expect("standard layout");
        // (B, C_out, HW) -> (C_out, B·HW)
        let mut dmat = vec![T::zero(); self.out_channels * g.b * plane];
        for bi in 0..g.b {
            for co in 0..self.out_channels {
                dmat[co * g.b * plane + bi * plane..][..plane]
                    .copy_from_slice(&dys[(bi * self.out_channels + co) * plane..][..plane]);
            }
        }
        let dmat = Array2::from_shape_vec((self.out_channels, g.b * plane), dmat).expect("dy matrix");
        let xs = x.as_standard_layout();
        let col = self.im2col(xs.as_slice().expect("standard layout"), g);

        if let Some(grads) = grads {
            let rows = col.nrows();
            let mut dw = Array2::<T>::zeros((self.out_channels, rows));
            general_mat_mul(T::one(), &dmat, &col.t(), T::zero(), &mut dw);
            let gw = grads.get_mut(self.weight);
            let mut gw2 = gw
                .view_mut()
                .into_shape_with_order((self.out_channels, rows))
                .expect("contiguous conv weight grad");
            gw2 += &dw;
            if let Some(bid) = self.bias {
                let db: Array1<T> = dmat.sum_axis(Axis(1));
                let gb = grads.get_mut(bid);
                for (gv, dv) in gb.iter_mut().zip(db.iter()) {
                    *gv += *dv;
                }
            }
        }

        let mut dcol = Array2::<T>::zeros(col.dim());
        general_mat_mul(T::one(), &self.weight_matrix(store).t(), &dmat, T::zero(), &mut dcol);
        self.col2im(&dcol, g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive_conv(
        x: &Array4<f64>,
        w: &ndarray::ArrayD<f64>,
        b: Option<&ndarray::ArrayD<f64>>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (n, c, h, wd) = x.dim();
        let (co, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        Array4::from_shape_fn((n, co, ho, wo), |(bi, o, oy, ox)| {
            let mut acc = b.map(|b| b[[o]]).unwrap_or(0.0);
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w[[o, ci, ky, kx]] * x[[bi, ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn check_against_naive(k: usize, stride: usize, pad: usize, bias: bool, hw: (usize, usize)) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 3, 4, k, stride, pad, bias, Init::Uniform(1.0), &mut rng);
        if let Some(b) = conv.bias {
            store.get_mut(b).mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        let x = Array4::from_shape_fn((2, 3, hw.0, hw.1), |_| rng.random_range(-1.0..1.0));
        let y = conv.forward(&store, &x);
        let expected = naive_conv(&x, store.get(conv.weight), conv.bias.map(|b| store.get(b)), stride, pad);
        assert_eq!(y.dim(), expected.dim());
        for (a, b) in y.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn matches_naive_convolution() {
        check_against_naive(3, 1, 1, true, (5, 6));
        check_against_naive(7, 2, 3, false, (9, 8));
        check_against_naive(1, 2, 0, false, (6, 6));
        check_against_naive(3, 2, 1, true, (7, 7));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for &(k, s, p) in &[(3usize, 1usize, 1usize), (3, 2, 1), (1, 2, 0)] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut store = ParamStore::<f64>::new();
            let conv = Conv2d::new(&mut store, "c", 2, 3, k, s, p, true, Init::Uniform(1.0), &mut rng);
            let x = Array4::from_shape_fn((2, 2, 5, 5), |_| rng.random_range(-1.0..1.0));
            let y = conv.forward(&store, &x);
            let r = Array4::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0));
            let loss = |st: &ParamStore<f64>, xx: &Array4<f64>| (conv.forward(st, xx) * &r).sum();
            let mut grads = store.zeros_like();
            let dx = conv.backward(&store, &x, &r, Some(&mut grads));
            let h = 1e-6;
            for idx in [(0, 0, 0, 0), (1, 1, 2, 3), (0, 1, 4, 4)] {
                let mut xp = x.clone();
                xp[idx] += h;
                let mut xm = x.clone();
                xm[idx] -= h;
                let fd = (loss(&store, &xp) - loss(&store, &xm)) / (2.0 * h);
                assert!((fd - dx[idx]).abs() < 1e-7, "dx {fd} vs {}", dx[idx]);
            }
            for id in [conv.weight, conv.bias.unwrap()] {
                let n = store.get(id).len();
                for flat in [0, n / 2, n - 1] {
                    let mut sp = store.clone();
                    sp.get_mut(id).as_slice_mut().unwrap()[flat] += h;
                    let mut sm = store.clone();
                    sm.get_mut(id).as_slice_mut().unwrap()[flat] -= h;
                    let fd = (loss(&sp, &x) - loss(&sm, &x)) / (2.0 * h);
                    let an = grads.get(id).as_slice().unwrap()[flat];
                    assert!((fd - an).abs() < 1e-7, "param {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn frozen_backward_leaves_gradients_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 2, 2, 3, 1, 1, true, Init::Uniform(1.0), &mut rng);
        let x = Array4::from_shape_fn((1, 2, 4, 4), |_| rng.random_range(-1.0..1.0));
        let dy = Array4::from_elem((1, 2, 4, 4), 1.0);
        let dx = conv.backward(&store, &x, &dy, None);
        assert_eq!(dx.dim(), x.dim());
    }

    #[test]
    fn parameter_count_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", 64, 3, 3, 1, 1, true, Init::Uniform(1.0), &mut rng);
        assert_eq!(conv.num_params(), 64 * 9 * 3 + 3);
        assert_eq!(store.count_trainable(""), conv.num_params());
    }
}
