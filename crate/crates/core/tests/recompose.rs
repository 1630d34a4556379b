use decompseg::recompose::{
    average_mask_score, component_images, component_images_raw, recompose, recompose_raw,
};
use decompseg::{Decomposition, MaskStack};
use ndarray::{Array4, Array5, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simplex(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    let mut m = Array4::from_shape_fn(shape, |_| rng.random_range(0.01..1.0f64));
    let s = m.sum_axis(Axis(1)).insert_axis(Axis(1));
    m /= &s;
    m
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (1usize..3, 2usize..5, 1usize..5, 1usize..5, any::<u64>())
}

proptest! {
    #[test]
    fn recompose_is_linear_in_an_unnormalized_mask((b, k, h, w, seed) in dims(), a in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Array4::from_shape_fn((b, k, h, w), |_| rng.random_range(-1.0..1.0));
        let x = Array5::from_shape_fn((b, k, 3, h, w), |_| rng.random_range(-1.0..1.0));
        let lhs = recompose_raw((&m * a).view(), x.view()).unwrap();
        let rhs = recompose_raw(m.view(), x.view()).unwrap() * a;
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - r).abs() <= 1e-12 * (1.0 + r.abs()));
        }
    }

    #[test]
    fn components_sum_to_the_reconstruction((b, k, h, w, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Array4::from_shape_fn((b, k, h, w), |_| rng.random_range(-1.0..1.0));
        let x = Array5::from_shape_fn((b, k, 3, h, w), |_| rng.random_range(-1.0..1.0));
        let comp = component_images_raw(m.view(), x.view()).unwrap();
        let r = recompose_raw(m.view(), x.view()).unwrap();
        // Same summation order as the reconstruction.
        let mut sum = Array4::<f64>::zeros(r.dim());
        for ki in 0..k {
            sum += &comp.index_axis(Axis(1), ki);
        }
        prop_assert_eq!(sum, r);
    }

    #[test]
    fn identical_image_lets_reproduce_the_image((b, k, h, w, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Array4::from_shape_fn((b, 3, h, w), |_| rng.random_range(0.0..1.0));
        let m = MaskStack::new(simplex(&mut rng, (b, k, h, w))).unwrap();
        let x = Decomposition::new(Array5::from_shape_fn((b, k, 3, h, w), |(bi, _, c, y, xx)| img[[bi, c, y, xx]])).unwrap();
        let r = recompose(&m, &x).unwrap();
        for (a, e) in r.iter().zip(&img) {
            // Σ m_k is one up to rounding, so the result is I up to a few ulps.
            prop_assert!((a - e).abs() <= 4.0 * f64::EPSILON);
        }
    }

    #[test]
    fn average_scores_form_a_distribution((b, k, h, w, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = MaskStack::new(simplex(&mut rng, (b, k, h, w))).unwrap();
        let avg = average_mask_score(&m);
        prop_assert_eq!(avg.dim(), (b, k));
        for row in avg.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn ops_match_loop_oracles(k in 2usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, h, w) = (1, 3, 3);
        let m = MaskStack::new(simplex(&mut rng, (b, k, h, w))).unwrap();
        let x = Decomposition::new(Array5::from_shape_fn((b, k, 3, h, w), |_| rng.random_range(-2.0..2.0))).unwrap();
        let (mv, xv) = (m.view(), x.view());
        let r = recompose(&m, &x).unwrap();
        let comp = component_images(&m, &x).unwrap();
        let avg = average_mask_score(&m);
        for c in 0..3 {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ki in 0..k {
                        let v = mv[[0, ki, y, xx]] * xv[[0, ki, c, y, xx]];
                        prop_assert!((comp[[0, ki, c, y, xx]] - v).abs() <= 1e-12);
                        acc += v;
                    }
                    prop_assert!((r[[0, c, y, xx]] - acc).abs() <= 1e-12);
                }
            }
        }
        for ki in 0..k {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += mv[[0, ki, y, xx]];
                }
            }
            prop_assert!((avg[[0, ki]] - s / 9.0).abs() <= 1e-12);
        }
    }
}
