use decompseg::losses::{
    loss_classifier, loss_classifier_grad, loss_cls, loss_cls_grad, loss_mask, loss_mask_grad, loss_recon, loss_total,
    loss_total_grad, ClassScorer,
};
use decompseg::models::{Classifier, ClassifierSpec};
use decompseg::recompose::average_mask_score;
use decompseg::{Decomposition, ImageBatch, LossWeights, MaskStack, TagBatch, TagLabel};
use ndarray::{Array2, Array4, Array5, ArrayView2, ArrayView4, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const EPS: f64 = LossWeights::DEFAULT_EPS;

/// Smooth stand-in classifier: sigmoid of a fixed linear map.
struct LinearScorer {
    w: Array4<f64>,
    b: Vec<f64>,
}

impl ClassScorer<f64> for LinearScorer {
    type Cache = Array2<f64>;

    fn num_outputs(&self) -> usize {
        self.b.len()
    }

    fn score(&self, images: ArrayView4<'_, f64>) -> decompseg::Result<(Array2<f64>, Array2<f64>)> {
        let s = Array2::from_shape_fn((images.dim().0, self.b.len()), |(i, j)| {
            let z = (&images.index_axis(Axis(0), i) * &self.w.index_axis(Axis(0), j)).sum() + self.b[j];
            1.0 / (1.0 + (-z).exp())
        });
        Ok((s.clone(), s))
    }

    fn score_input_grad(&self, s: &Array2<f64>, d: ArrayView2<'_, f64>) -> Array4<f64> {
        let (_, c, h, w) = self.w.dim();
        let mut out = Array4::zeros((s.nrows(), c, h, w));
        for i in 0..s.nrows() {
            for j in 0..self.b.len() {
                let g = d[[i, j]] * s[[i, j]] * (1.0 - s[[i, j]]);
                out.index_axis_mut(Axis(0), i).scaled_add(g, &self.w.index_axis(Axis(0), j));
            }
        }
        out
    }
}

fn softmax(z: &Array4<f64>) -> Array4<f64> {
    let top = z.fold_axis(Axis(1), f64::NEG_INFINITY, |a, &b| a.max(b)).insert_axis(Axis(1));
    let mut m = (z - &top).mapv(f64::exp);
    let s = m.sum_axis(Axis(1)).insert_axis(Axis(1));
    m /= &s;
    m
}

/// Pulls `dL/dm` back through the per-pixel softmax.
fn logit_grad(m: &Array4<f64>, dm: &Array4<f64>) -> Array4<f64> {
    let inner = (m * dm).sum_axis(Axis(1)).insert_axis(Axis(1));
    m * &(dm - &inner)
}

fn tags(b: usize, k: usize, rng: &mut ChaCha8Rng) -> TagBatch<f64> {
    let labels: Vec<TagLabel> = (0..b)
        .map(|_| {
            let mut y: Vec<f64> = (0..k - 1).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
            y.push(1.0);
            TagLabel::indicator(y).unwrap()
        })
        .collect();
    TagBatch::from_labels(&labels).unwrap()
}

struct Case {
    z: Array4<f64>,
    x: Array5<f64>,
    image: ImageBatch<f64>,
    y: TagBatch<f64>,
    g: LinearScorer,
}

fn case(k: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, h, w) = (2, 4, 4);
    Case {
        z: Array4::from_shape_fn((b, k, h, w), |_| rng.random_range(-1.5..1.5)),
        x: Array5::from_shape_fn((b, k, 3, h, w), |_| rng.random_range(0.0..1.0)),
        image: ImageBatch::new(Array4::from_shape_fn((b, 3, h, w), |_| rng.random_range(0.0..1.0))).unwrap(),
        y: tags(b, k, &mut rng),
        g: LinearScorer {
            w: Array4::from_shape_fn((k - 1, 3, h, w), |_| rng.random_range(-0.5..0.5)),
            b: (0..k - 1).map(|_| rng.random_range(-0.5..0.5)).collect(),
        },
    }
}

fn max_rel_err<D: ndarray::Dimension>(
    at: &ndarray::Array<f64, D>,
    analytic: &ndarray::Array<f64, D>,
    f: impl Fn(&ndarray::Array<f64, D>) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..at.len() {
        let mut p = at.clone();
        let mut q = at.clone();
        p.as_slice_mut().unwrap()[i] += STEP;
        q.as_slice_mut().unwrap()[i] -= STEP;
        let n = (f(&p) - f(&q)) / (2.0 * STEP);
        let a = analytic.as_slice().unwrap()[i];
        // Below the floor the central difference is dominated by roundoff.
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
    }
    worst
}

fn mask(z: &Array4<f64>) -> MaskStack<f64> {
    MaskStack::new(softmax(z)).unwrap()
}

fn decomp(x: &Array5<f64>) -> Decomposition<f64> {
    Decomposition::new(x.clone()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn recon_gradient_matches_differences(k in 2usize..=3, seed in any::<u64>()) {
        let c = case(k, seed);
        let w = LossWeights::new(0.0, 0.0).unwrap();
        let t = loss_total_grad(&mask(&c.z), &decomp(&c.x), &c.image, &c.y, &c.g, &w).unwrap();
        let dz = logit_grad(&softmax(&c.z), &t.d_mask);
        let f = |m: &MaskStack<f64>, x: &Decomposition<f64>| loss_total(m, x, &c.image, &c.y, &c.g, &w).unwrap().recon;
        prop_assert!(max_rel_err(&c.z, &dz, |z| f(&mask(z), &decomp(&c.x))) < TOL);
        prop_assert!(max_rel_err(&c.x, &t.d_decomposition, |x| f(&mask(&c.z), &decomp(x))) < TOL);
    }

    #[test]
    fn mask_gradient_matches_differences(k in 2usize..=3, seed in any::<u64>()) {
        let c = case(k, seed);
        let m = mask(&c.z);
        let y_hat = average_mask_score(&m);
        let (_, d_yhat) = loss_mask_grad(y_hat.view(), &c.y, EPS).unwrap();
        let (_, _, h, w) = c.z.dim();
        let dm = d_yhat.insert_axis(Axis(2)).insert_axis(Axis(3)).broadcast(c.z.dim()).unwrap().mapv(|v| v / (h * w) as f64);
        let dz = logit_grad(m.as_array(), &dm);
        let f = |z: &Array4<f64>| loss_mask(average_mask_score(&mask(z)).view(), &c.y, EPS).unwrap();
        prop_assert!(max_rel_err(&c.z, &dz, f) < TOL);
    }

    #[test]
    fn cls_gradient_matches_differences(k in 2usize..=3, seed in any::<u64>()) {
        let c = case(k, seed);
        let (_, dm, dx) = loss_cls_grad(&mask(&c.z), &decomp(&c.x), &c.y, &c.g, EPS).unwrap();
        let dz = logit_grad(&softmax(&c.z), &dm);
        prop_assert!(max_rel_err(&c.z, &dz, |z| loss_cls(&mask(z), &decomp(&c.x), &c.y, &c.g, EPS).unwrap()) < TOL);
        prop_assert!(max_rel_err(&c.x, &dx, |x| loss_cls(&mask(&c.z), &decomp(x), &c.y, &c.g, EPS).unwrap()) < TOL);
    }

    #[test]
    fn classifier_loss_gradient_matches_differences(k in 2usize..=3, seed in any::<u64>()) {
        let c = case(k, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let z = Array2::from_shape_fn((2, k - 1), |_| rng.random_range(0.05..0.95));
        let (_, d) = loss_classifier_grad(z.view(), &c.y, EPS).unwrap();
        prop_assert!(max_rel_err(&z, &d, |v| loss_classifier(v.view(), &c.y, EPS).unwrap()) < TOL);
    }

    #[test]
    fn total_gradient_matches_differences(
        k in 2usize..=3,
        seed in any::<u64>(),
        lm in 0.0f64..2.0,
        lc in 0.0f64..2.0,
    ) {
        let c = case(k, seed);
        let w = LossWeights::new(lm, lc).unwrap();
        let t = loss_total_grad(&mask(&c.z), &decomp(&c.x), &c.image, &c.y, &c.g, &w).unwrap();
        let dz = logit_grad(&softmax(&c.z), &t.d_mask);
        let f = |m: &MaskStack<f64>, x: &Decomposition<f64>| loss_total(m, x, &c.image, &c.y, &c.g, &w).unwrap().total;
        prop_assert!(max_rel_err(&c.z, &dz, |z| f(&mask(z), &decomp(&c.x))) < TOL);
        prop_assert!(max_rel_err(&c.x, &t.d_decomposition, |x| f(&mask(&c.z), &decomp(x))) < TOL);
        prop_assert!(t.report.identity_error() <= 1e-12);
    }

    #[test]
    fn recon_is_zero_only_on_equal_inputs(seed in any::<u64>(), i in 0usize..48, delta in 1e-3f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = ImageBatch::new(Array4::from_shape_fn((1, 3, 4, 4), |_| rng.random_range(0.0..1.0))).unwrap();
        prop_assert_eq!(loss_recon(a.view(), &a).unwrap(), 0.0);
        let mut b = a.as_array().clone();
        b.as_slice_mut().unwrap()[i] += delta;
        prop_assert!(loss_recon(b.view(), &a).unwrap() > 0.0);
    }

    #[test]
    fn mask_loss_ignores_pixel_order(k in 2usize..=3, seed in any::<u64>()) {
        let c = case(k, seed);
        let m = softmax(&c.z);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..16).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permuted = Array4::from_shape_fn(m.dim(), |(b, kk, y, x)| {
            let p = perm[y * 4 + x];
            m[[b, kk, p / 4, p % 4]]
        });
        let a = loss_mask(average_mask_score(&MaskStack::new(m).unwrap()).view(), &c.y, EPS).unwrap();
        let b = loss_mask(average_mask_score(&MaskStack::new(permuted).unwrap()).view(), &c.y, EPS).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn losses_stay_finite_at_saturation(k in 2usize..=3, seed in any::<u64>()) {
        let c = case(k, seed);
        let scaled = c.z.mapv(|v| v * 1e4);
        let m = MaskStack::new(softmax(&scaled)).unwrap();
        let hard = Array2::from_shape_fn((2, k), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        prop_assert!(loss_mask(hard.view(), &c.y, EPS).unwrap().is_finite());
        let zs = Array2::from_shape_fn((2, k - 1), |(i, _)| (i % 2) as f64);
        prop_assert!(loss_classifier(zs.view(), &c.y, EPS).unwrap().is_finite());
        let w = LossWeights::default();
        prop_assert!(loss_total(&m, &decomp(&c.x), &c.image, &c.y, &c.g, &w).unwrap().is_finite());
    }
}

#[test]
fn guidance_never_touches_classifier_parameters() {
    let spec = ClassifierSpec {
        num_classes: 2,
        base_width: 4,
        input_size: (32, 32),
    };
    let mut g = Classifier::<f64>::build(&spec, 3).unwrap();
    g.freeze();
    let before = g.checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = Array4::from_shape_fn((1, 2, 32, 32), |_| rng.random_range(-1.0..1.0));
    let x = Array5::from_shape_fn((1, 2, 3, 32, 32), |_| rng.random_range(0.0..1.0));
    let y = TagBatch::from_labels(&[TagLabel::indicator(vec![1.0, 1.0]).unwrap()]).unwrap();
    let (_, dm, dx) = loss_cls_grad(&mask(&z), &decomp(&x), &y, &g, EPS).unwrap();
    assert!(dm.iter().chain(dx.iter()).any(|&v| v != 0.0));
    assert_eq!(g.checksum(), before);
}
