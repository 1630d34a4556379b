//! Parameter-free operators and the small parametric layers besides
//! convolution. Every forward has a matching backward taking the cached
//! input (or a dedicated cache) and the upstream gradient.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;

use super::init::Init;
use super::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu<T: Scalar>(x: &Array4<T>, slope: f64) -> Array4<T> {
    let a = T::lit(slope);
    x.mapv(|v| if v > T::zero() { v } else { v * a })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Array4<T>, dy: &Array4<T>, slope: f64) -> Array4<T> {
    let a = T::lit(slope);
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx)
        .and(x)
        .for_each(|d, &v| {
            if v <= T::zero() {
                *d *= a;
            }
        });
    dx
}

/// In-place leaky rectifier, returning the activated tensor; the backward
/// pass can use the output because the sign is preserved.
pub fn leaky_relu_inplace<T: Scalar>(mut x: Array4<T>, slope: f64) -> Array4<T> {
    let a = T::lit(slope);
    x.mapv_inplace(|v| if v > T::zero() { v } else { v * a });
    x
}

pub fn relu_inplace<T: Scalar>(mut x: Array4<T>) -> Array4<T> {
    x.mapv_inplace(|v| v.max(T::zero()));
    x
}

/// Backward of ReLU given its output.
pub fn relu_backward_from_output<T: Scalar>(y: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

/// Max pooling; padding acts as `-inf`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    input_dim: (usize, usize, usize, usize),
    /// Flat input index of each output's maximum.
    argmax: Vec<usize>,
}

impl MaxPool2d {
    pub const HALVE: MaxPool2d = MaxPool2d {
        kernel: 2,
        stride: 2,
        padding: 0,
    };

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<T: Scalar>(&self, x: &Array4<T>) -> (Array4<T>, PoolCache) {
        let (b, c, h, w) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if best_idx == usize::MAX || xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        (
            Array4::from_shape_vec((b, c, ho, wo), out).expect("pool output"),
            PoolCache {
                input_dim: (b, c, h, w),
                argmax,
            },
        )
    }

    pub fn backward<T: Scalar>(&self, cache: &PoolCache, dy: &Array4<T>) -> Array4<T> {
        let (b, c, h, w) = cache.input_dim;
        let mut dx = vec![T::zero(); b * c * h * w];
        for (&idx, &g) in cache.argmax.iter().zip(dy.iter()) {
            dx[idx] += g;
        }
        Array4::from_shape_vec(cache.input_dim, dx).expect("pool grad")
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Array4<T>, factor: usize) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    Array4::from_shape_fn((b, c, h * factor, w * factor), |(bi, ci, y, xx)| {
        x[[bi, ci, y / factor, xx / factor]]
    })
}

pub fn upsample_nearest_backward<T: Scalar>(dy: &Array4<T>, factor: usize) -> Array4<T> {
    let (b, c, h, w) = dy.dim();
    let mut dx = Array4::zeros((b, c, h / factor, w / factor));
    for ((bi, ci, y, xx), &g) in dy.indexed_iter() {
        dx[[bi, ci, y / factor, xx / factor]] += g;
    }
    dx
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("matching batch and spatial dims")
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels<T: Scalar>(d: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    (
        d.slice(s![.., ..first, .., ..]).to_owned(),
        d.slice(s![.., first.., .., ..]).to_owned(),
    )
}

/// Softmax over the channel axis of `(B, K, H, W)` logits.
pub fn softmax_channels<T: Scalar>(logits: &Array4<T>) -> Array4<T> {
    let (b, k, h, w) = logits.dim();
    let mut out = Array4::zeros((b, k, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut mx = T::neg_infinity();
                for c in 0..k {
                    mx = mx.max(logits[[bi, c, y, x]]);
                }
                let mut sum = T::zero();
                for c in 0..k {
                    let e = (logits[[bi, c, y, x]] - mx).exp();
                    out[[bi, c, y, x]] = e;
                    sum += e;
                }
                for c in 0..k {
                    out[[bi, c, y, x]] /= sum;
                }
            }
        }
    }
    out
}

/// Gradient with respect to the logits given the softmax output `p`:
/// `dz = p ⊙ (dp − Σ_k p·dp)`.
pub fn softmax_channels_backward<T: Scalar>(p: &Array4<T>, dp: &Array4<T>) -> Array4<T> {
    let dot = (p * dp).sum_axis(Axis(1)).insert_axis(Axis(1));
    let centered = dp - &dot.broadcast(dp.dim()).expect("broadcast over classes");
    p * &centered
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean over the spatial axes: `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (_, _, h, w) = x.dim();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)) / T::lit((h * w) as f64)
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Array2<T>, h: usize, w: usize) -> Array4<T> {
    let (b, c) = dy.dim();
    let scale = T::one() / T::lit((h * w) as f64);
    Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| dy[[bi, ci]] * scale)
}

/// Fully connected layer, `y = x·Wᵀ + b` with `W` of shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.sample(&[out_features, in_features], in_features, rng),
            true,
        );
        let bias = store.add(
            format!("{name}.bias"),
            ArrayD::zeros(IxDyn(&[out_features])),
            true,
        );
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }

    fn weight_matrix<'a, T: Scalar>(&self, store: &'a ParamStore<T>) -> ndarray::ArrayView2<'a, T> {
        store
            .get(self.weight)
            .view()
            .into_shape_with_order((self.out_features, self.in_features))
            .expect("contiguous linear weight")
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Array2<T>) -> Array2<T> {
        let mut y = Array2::zeros((x.nrows(), self.out_features));
        general_mat_mul(T::one(), x, &self.weight_matrix(store).t(), T::zero(), &mut y);
        let b = store
            .get(self.bias)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bias vector");
        y += &b;
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Array2<T>,
        dy: &Array2<T>,
        grads: Option<&mut Gradients<T>>,
    ) -> Array2<T> {
        if let Some(grads) = grads {
            let mut dw = Array2::zeros((self.out_features, self.in_features));
            general_mat_mul(T::one(), &dy.t(), x, T::zero(), &mut dw);
            let mut gw = grads
                .get_mut(self.weight)
                .view_mut()
                .into_shape_with_order((self.out_features, self.in_features))
                .expect("contiguous grad");
            gw += &dw;
            let db: Array1<T> = dy.sum_axis(Axis(0));
            for (g, d) in grads.get_mut(self.bias).iter_mut().zip(db.iter()) {
                *g += *d;
            }
        }
        let mut dx = Array2::zeros(x.dim());
        general_mat_mul(T::one(), dy, &self.weight_matrix(store), T::zero(), &mut dx);
        dx
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub enum BnCache<T> {
    /// Normalized activations and per-channel `1/sqrt(var + eps)` of the batch.
    Train { x_hat: Array4<T>, inv_std: Array1<T> },
    /// Per-channel `1/sqrt(running_var + eps)`.
    Eval { inv_std: Array1<T> },
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let ones = ArrayD::from_elem(IxDyn(&[channels]), T::one());
        let zeros = ArrayD::zeros(IxDyn(&[channels]));
        Self {
            gamma: store.add(format!("{name}.weight"), ones.clone(), true),
            beta: store.add(format!("{name}.bias"), zeros.clone(), true),
            running_mean: store.add(format!("{name}.running_mean"), zeros, false),
            running_var: store.add(format!("{name}.running_var"), ones, false),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    fn channel(store_val: &ArrayD<impl Scalar>, c: usize) -> f64 {
        store_val[[c]].as_f64()
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        x: &Array4<T>,
    ) -> (Array4<T>, BnCache<T>) {
        let (b, c, h, w) = x.dim();
        let n = (b * h * w) as f64;
        let mut x_hat = Array4::zeros(x.dim());
        let mut y = Array4::zeros(x.dim());
        let mut inv_std = Array1::zeros(c);
        for ci in 0..c {
            let xc = x.slice(s![.., ci, .., ..]);
            let mean = xc.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = xc.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = T::lit(is);
            let gamma = Self::channel(store.get(self.gamma), ci);
            let beta = Self::channel(store.get(self.beta), ci);
            let (mean_t, is_t, g_t, b_t) = (T::lit(mean), T::lit(is), T::lit(gamma), T::lit(beta));
            ndarray::Zip::from(x_hat.slice_mut(s![.., ci, .., ..]))
                .and(y.slice_mut(s![.., ci, .., ..]))
                .and(&xc)
                .for_each(|xh, yy, &v| {
                    *xh = (v - mean_t) * is_t;
                    *yy = *xh * g_t + b_t;
                });
            let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
            let m = self.momentum;
            let rm = store.get_mut(self.running_mean);
            rm[[ci]] = T::lit((1.0 - m) * rm[[ci]].as_f64() + m * mean);
            let rv = store.get_mut(self.running_var);
            rv[[ci]] = T::lit((1.0 - m) * rv[[ci]].as_f64() + m * unbiased);
        }
        (y, BnCache::Train { x_hat, inv_std })
    }

    /// Normalizes with the running statistics.
    pub fn forward_eval<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Array4<T>,
    ) -> (Array4<T>, BnCache<T>) {
        let c = x.dim().1;
        let mut y = x.clone();
        let mut inv_std = Array1::zeros(c);
        for ci in 0..c {
            let is = 1.0 / (Self::channel(store.get(self.running_var), ci) + self.eps).sqrt();
            inv_std[ci] = T::lit(is);
            let mean = T::lit(Self::channel(store.get(self.running_mean), ci));
            let scale = T::lit(Self::channel(store.get(self.gamma), ci) * is);
            let beta = T::lit(Self::channel(store.get(self.beta), ci));
            y.slice_mut(s![.., ci, .., ..])
                .mapv_inplace(|v| (v - mean) * scale + beta);
        }
        (y, BnCache::Eval { inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &BnCache<T>,
        dy: &Array4<T>,
        grads: Option<&mut Gradients<T>>,
    ) -> Array4<T> {
        let (b, c, h, w) = dy.dim();
        let mut dx = Array4::zeros(dy.dim());
        match cache {
            BnCache::Train { x_hat, inv_std } => {
                let n = T::lit((b * h * w) as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ci in 0..c {
                    let dyc = dy.slice(s![.., ci, .., ..]);
                    let xh = x_hat.slice(s![.., ci, .., ..]);
                    let sum_dy: T = dyc.sum();
                    let sum_dy_xh: T = (&dyc * &xh).sum();
                    dgamma[ci] = sum_dy_xh;
                    dbeta[ci] = sum_dy;
                    let gamma = store.get(self.gamma)[[ci]];
                    let k = gamma * inv_std[ci] / n;
                    ndarray::Zip::from(dx.slice_mut(s![.., ci, .., ..]))
                        .and(&dyc)
                        .and(&xh)
                        .for_each(|d, &g, &xv| *d = k * (n * g - sum_dy - xv * sum_dy_xh));
                }
                if let Some(grads) = grads {
                    for ci in 0..c {
                        grads.get_mut(self.gamma)[[ci]] += dgamma[ci];
                        grads.get_mut(self.beta)[[ci]] += dbeta[ci];
                    }
                }
            }
            BnCache::Eval { inv_std } => {
                for ci in 0..c {
                    let scale = store.get(self.gamma)[[ci]] * inv_std[ci];
                    dx.slice_mut(s![.., ci, .., ..])
                        .assign(&(&dy.slice(s![.., ci, .., ..]) * scale));
                }
                // Affine parameter gradients are only needed in training mode.
                debug_assert!(grads.is_none(), "eval-mode batch norm is not trained");
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))
    }

    fn fd_check<F: Fn(&Array4<f64>) -> f64>(f: F, x: &Array4<f64>, analytic: &Array4<f64>) {
        let h = 1e-6;
        for (idx, &a) in analytic.indexed_iter() {
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - a).abs() < 1e-6 * (1.0 + a.abs()), "at {idx:?}: fd {fd} vs {a}");
        }
    }

    #[test]
    fn maxpool_gradient_routes_to_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for pool in [MaxPool2d::HALVE, MaxPool2d { kernel: 3, stride: 2, padding: 1 }] {
            let x = rand4(&mut rng, (2, 2, 6, 6));
            let (y, cache) = pool.forward(&x);
            let r = rand4(&mut rng, y.dim());
            let dx = pool.backward(&cache, &r);
            fd_check(|xx| (pool.forward(xx).0 * &r).sum(), &x, &dx);
        }
    }

    #[test]
    fn maxpool_output_shapes() {
        assert_eq!(MaxPool2d::HALVE.output_hw(224, 224), (112, 112));
        assert_eq!(MaxPool2d { kernel: 3, stride: 2, padding: 1 }.output_hw(112, 112), (56, 56));
    }

    #[test]
    fn upsample_and_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand4(&mut rng, (1, 2, 3, 3));
        let y = upsample_nearest(&x, 2);
        assert_eq!(y.dim(), (1, 2, 6, 6));
        assert_eq!(y[[0, 1, 5, 4]], x[[0, 1, 2, 2]]);
        let r = rand4(&mut rng, y.dim());
        let dx = upsample_nearest_backward(&r, 2);
        fd_check(|xx| (upsample_nearest(xx, 2) * &r).sum(), &x, &dx);
    }

    #[test]
    fn softmax_sums_to_one_and_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand4(&mut rng, (2, 3, 2, 2)) * 5.0;
        let p = softmax_channels(&z);
        for s in p.sum_axis(Axis(1)).iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let r = rand4(&mut rng, p.dim());
        let dz = softmax_channels_backward(&p, &r);
        fd_check(|zz| (softmax_channels(zz) * &r).sum(), &z, &dz);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let z = Array4::<f64>::from_shape_vec((1, 2, 1, 1), vec![1000.0, -1000.0]).unwrap();
        let p = softmax_channels(&z);
        assert_eq!(p[[0, 0, 0, 0]], 1.0);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn leaky_relu_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand4(&mut rng, (1, 2, 3, 3));
        let r = rand4(&mut rng, x.dim());
        let dx = leaky_relu_backward(&x, &r, LEAKY_SLOPE);
        fd_check(|xx| (leaky_relu(xx, LEAKY_SLOPE) * &r).sum(), &x, &dx);
    }

    #[test]
    fn batchnorm_train_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        store.get_mut(bn.gamma).mapv_inplace(|_| rng.random_range(0.5..1.5));
        store.get_mut(bn.beta).mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let x = rand4(&mut rng, (3, 2, 2, 2));
        let r = rand4(&mut rng, x.dim());
        let (_, cache) = bn.forward_train(&mut store.clone(), &x);
        let mut grads = store.zeros_like();
        let dx = bn.backward(&store, &cache, &r, Some(&mut grads));
        fd_check(|xx| (bn.forward_train(&mut store.clone(), xx).0 * &r).sum(), &x, &dx);

        let h = 1e-6;
        for id in [bn.gamma, bn.beta] {
            for c in 0..2 {
                let mut sp = store.clone();
                sp.get_mut(id)[[c]] += h;
                let mut sm = store.clone();
                sm.get_mut(id)[[c]] -= h;
                let fd = ((bn.forward_train(&mut sp, &x).0 * &r).sum()
                    - (bn.forward_train(&mut sm, &x).0 * &r).sum())
                    / (2.0 * h);
                assert!((fd - grads.get(id)[[c]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batchnorm_eval_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2);
        store.get_mut(bn.running_mean)[[1]] = 0.3;
        store.get_mut(bn.running_var)[[0]] = 2.0;
        let x = rand4(&mut rng, (2, 2, 2, 2));
        let r = rand4(&mut rng, x.dim());
        let (_, cache) = bn.forward_eval(&store, &x);
        let dx = bn.backward(&store, &cache, &r, None);
        fd_check(|xx| (bn.forward_eval(&store, xx).0 * &r).sum(), &x, &dx);
    }

    #[test]
    fn running_statistics_move_towards_batch() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1);
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        bn.forward_train(&mut store, &x);
        assert!((store.get(bn.running_mean)[[0]] - 0.2).abs() < 1e-12);
        // unbiased var = 2, 0.9·1 + 0.1·2
        assert!((store.get(bn.running_var)[[0]] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "fc", 4, 3, Init::Uniform(1.0), &mut rng);
        let x = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
        let r = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        let mut grads = store.zeros_like();
        let dx = lin.backward(&store, &x, &r, Some(&mut grads));
        let h = 1e-6;
        for (idx, &a) in dx.indexed_iter() {
            let mut p = x.clone();
            p[idx] += h;
            let mut m = x.clone();
            m[idx] -= h;
            let fd = ((lin.forward(&store, &p) * &r).sum() - (lin.forward(&store, &m) * &r).sum()) / (2.0 * h);
            assert!((fd - a).abs() < 1e-7);
        }
        assert_eq!(lin.num_params(), store.count_trainable(""));
        assert!(!grads.is_all_zero());
    }

    #[test]
    fn sigmoid_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
        assert!((sigmoid(2.0f64) + sigmoid(-2.0f64) - 1.0).abs() < 1e-15);
    }
}
