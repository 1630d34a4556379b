use approx::assert_relative_eq;
use decompseg::losses::ClassScorer;
use decompseg::models::spec::{REFERENCE_DECODER_TOTAL, REFERENCE_ENCODER_TOTAL};
use decompseg::models::{Classifier, ClassifierSpec, ModelSpec, Segmenter};
use decompseg::nn::ParamId;
use decompseg::{Error, ImageBatch};
use ndarray::{Array4, Array5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(seed: u64, b: usize, h: usize, w: usize) -> ImageBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBatch::new(Array4::from_shape_fn((b, 3, h, w), |_| rng.random_range(0.0..1.0))).unwrap()
}

fn tiny_spec(k: usize) -> ModelSpec {
    ModelSpec::unet(k, 16, 16, [2, 2, 3, 3, 4]).unwrap()
}

#[test]
fn full_size_parameter_counts() {
    let seg = Segmenter::<f32>::build(&ModelSpec::paper(2).unwrap(), 0).unwrap();
    assert_eq!(seg.encoder_params(), REFERENCE_ENCODER_TOTAL);
    assert_eq!(seg.image_decoder_params(), REFERENCE_DECODER_TOTAL);
    assert_eq!(seg.mask_decoder_params(), REFERENCE_DECODER_TOTAL - 3_462 + 1_154);
    let (_, mask, image) = seg.stages();
    assert_eq!(image.last().unwrap().num_params(), 3_462);
    assert_eq!(mask.last().unwrap().num_params(), 1_154);
    assert_eq!(seg.mask_net().num_params(), 9_404_992 + 12_573_762);
}

#[test]
fn desk_forward_shapes_and_simplex() {
    let seg = Segmenter::<f64>::build(&ModelSpec::desk(2).unwrap(), 1).unwrap();
    let img = random_images(2, 2, 64, 64);
    let (m, x, _) = seg.forward_pair(&img).unwrap();
    assert_eq!(m.as_array().dim(), (2, 2, 64, 64));
    assert_eq!(x.as_array().dim(), (2, 2, 3, 64, 64));
    for b in 0..2 {
        for i in 0..64 {
            for j in 0..64 {
                let s = m.as_array()[[b, 0, i, j]] + m.as_array()[[b, 1, i, j]];
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
    let alone = seg.predict_mask(&img).unwrap();
    assert_eq!(alone.as_array(), m.as_array());
    assert_eq!(seg.decompose(&img).unwrap().as_array(), x.as_array());
}

#[test]
fn seeded_build_is_deterministic() {
    let spec = ModelSpec::desk(3).unwrap();
    let a = Segmenter::<f32>::build(&spec, 9).unwrap();
    let b = Segmenter::<f32>::build(&spec, 9).unwrap();
    let c = Segmenter::<f32>::build(&spec, 10).unwrap();
    assert_eq!(a.params().checksum(), b.params().checksum());
    assert_ne!(a.params().checksum(), c.params().checksum());
}

#[test]
fn encoder_is_shared_storage() {
    let mut seg = Segmenter::<f64>::build(&tiny_spec(2), 3).unwrap();
    let ids_m = seg.mask_net().encoder_param_ids();
    let ids_x = seg.image_net().encoder_param_ids();
    assert_eq!(ids_m, ids_x);
    let img = random_images(4, 1, 16, 16);
    let before_m = seg.mask_net().forward_raw(&img).unwrap();
    let before_x = seg.image_net().forward_raw(&img).unwrap();
    let id: ParamId = ids_m[0];
    seg.params_mut().get_mut(id).mapv_inplace(|v| v * 1.5 + 0.1);
    assert_ne!(seg.mask_net().forward_raw(&img).unwrap(), before_m);
    assert_ne!(seg.image_net().forward_raw(&img).unwrap(), before_x);
    assert_eq!(seg.mask_net().params().get(id), seg.image_net().params().get(id));
}

#[test]
fn indivisible_input_is_rejected() {
    let seg = Segmenter::<f64>::build(&tiny_spec(2), 0).unwrap();
    let img = random_images(0, 1, 20, 16);
    assert!(matches!(seg.forward_pair(&img), Err(Error::Input(_))));
}

#[test]
fn declared_mismatch_fails_construction() {
    let mut spec = tiny_spec(2);
    spec.decoder_x[2].declared_params += 1;
    match Segmenter::<f32>::build(&spec, 0) {
        Err(Error::Construction { stage, .. }) => assert!(stage.contains("decoder"), "{stage}"),
        other => panic!("expected construction error, got {:?}", other.map(|_| ())),
    }
}

/// Scalar objective `Σ r1·M + Σ r2·X` and its gradients with respect to M and X.
fn objective(seg: &Segmenter<f64>, img: &ImageBatch<f64>, r1: &Array4<f64>, r2: &Array5<f64>) -> f64 {
    let (m, x, _) = seg.forward_pair(img).unwrap();
    (m.as_array() * r1).sum() + (x.as_array() * r2).sum()
}

#[test]
fn pair_backward_matches_finite_differences() {
    let k = 3;
    let mut seg = Segmenter::<f64>::build(&tiny_spec(k), 5).unwrap();
    let img = random_images(6, 2, 16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r1 = Array4::from_shape_fn((2, k, 16, 16), |_| rng.random_range(-1.0..1.0));
    let r2 = Array5::from_shape_fn((2, k, 3, 16, 16), |_| rng.random_range(-1.0..1.0));
    let (_, _, cache) = seg.forward_pair(&img).unwrap();
    let mut grads = seg.params().zeros_like();
    seg.backward_pair(&cache, &r1, &r2, &mut grads);

    let n = seg.params().len();
    let h = 1e-6;
    let mut checked = 0;
    for idx in 0..n {
        let id = ParamId::from_index(idx);
        let len = seg.params().get(id).len();
        for flat in [0, len / 2, len - 1] {
            let orig = seg.params().get(id).as_slice().unwrap()[flat];
            seg.params_mut().get_mut(id).as_slice_mut().unwrap()[flat] = orig + h;
            let up = objective(&seg, &img, &r1, &r2);
            seg.params_mut().get_mut(id).as_slice_mut().unwrap()[flat] = orig - h;
            let down = objective(&seg, &img, &r1, &r2);
            seg.params_mut().get_mut(id).as_slice_mut().unwrap()[flat] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads.get(id).as_slice().unwrap()[flat];
            assert!(
                (fd - an).abs() <= 1e-5 * (1.0 + fd.abs()),
                "{}[{flat}]: fd {fd} analytic {an}",
                seg.params().entries()[idx].name
            );
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn classifier_standard_parameter_count() {
    let g = Classifier::<f32>::build(&ClassifierSpec::standard(2), 0).unwrap();
    assert_eq!(g.num_params(), 11_177_025);
    let g5 = Classifier::<f32>::build(&ClassifierSpec::standard(5), 0).unwrap();
    assert_eq!(g5.num_params(), 11_177_025 + 3 * 513);
}

fn tiny_classifier(k: usize) -> Classifier<f64> {
    let spec = ClassifierSpec {
        num_classes: k,
        base_width: 2,
        input_size: (32, 32),
    };
    Classifier::build(&spec, 11).unwrap()
}

#[test]
fn classifier_outputs_are_probabilities() {
    let g = tiny_classifier(4);
    let img = random_images(1, 3, 32, 32);
    let p = g.predict(img.view()).unwrap();
    assert_eq!(p.dim(), (3, 3));
    assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn classifier_input_gradient_matches_finite_differences() {
    let g = tiny_classifier(3);
    let img = random_images(2, 2, 32, 32);
    let weights = ndarray::arr2(&[[0.7, -1.3], [0.2, 0.9]]);
    let f = |x: &Array4<f64>| (g.score(x.view()).unwrap().0 * &weights).sum();
    let (_, cache) = g.score(img.view()).unwrap();
    let before = g.checksum();
    let dx = g.score_input_grad(&cache, weights.view());
    assert_eq!(g.checksum(), before);
    let mut x = img.as_array().clone();
    let h = 1e-6;
    for &(b, c, i, j) in &[(0, 0, 0, 0), (1, 2, 31, 31), (0, 1, 13, 7), (1, 0, 5, 20)] {
        let orig = x[[b, c, i, j]];
        x[[b, c, i, j]] = orig + h;
        let up = f(&x);
        x[[b, c, i, j]] = orig - h;
        let down = f(&x);
        x[[b, c, i, j]] = orig;
        assert_relative_eq!((up - down) / (2.0 * h), dx[[b, c, i, j]], epsilon = 1e-7, max_relative = 1e-5);
    }
}

#[test]
fn classifier_training_backward_matches_finite_differences() {
    let mut g = tiny_classifier(2);
    let img = random_images(3, 4, 32, 32);
    let weights = ndarray::arr2(&[[0.5], [-1.0], [2.0], [0.3]]);
    let (_, cache) = g.forward_train(img.view()).unwrap();
    let d_logits = Classifier::probs_to_logit_grad(&cache, weights.view());
    let mut grads = g.params().zeros_like();
    g.backward_logits(&cache, &d_logits, Some(&mut grads));

    let h = 1e-6;
    for name in ["conv1.weight", "layer1.0.bn1.weight", "layer3.0.downsample.0.weight", "layer4.1.conv2.weight", "fc.weight", "fc.bias"] {
        let id = g.params().find(name).unwrap();
        let probe = |g: &mut Classifier<f64>, v: f64| {
            g.params_mut().get_mut(id).as_slice_mut().unwrap()[0] = v;
            let (p, _) = g.forward_train(img.view()).unwrap();
            (p * &weights).sum()
        };
        let orig = g.params().get(id).as_slice().unwrap()[0];
        let fd = (probe(&mut g, orig + h) - probe(&mut g, orig - h)) / (2.0 * h);
        probe(&mut g, orig);
        let an = grads.get(id).as_slice().unwrap()[0];
        assert_relative_eq!(fd, an, epsilon = 1e-7, max_relative = 1e-4);
    }
}

#[test]
fn pretrained_without_weights_is_resource_error() {
    let spec = ClassifierSpec::desk(2);
    let missing = std::path::Path::new("/nonexistent/resnet18.safetensors");
    let r = decompseg::models::build_classifier::<f32>(&spec, true, Some(missing), 0);
    assert!(matches!(r, Err(Error::Resource(_))));
}

#[test]
fn frozen_classifier_refuses_training_pass() {
    let mut g = tiny_classifier(2);
    g.freeze();
    let img = random_images(0, 1, 32, 32);
    assert!(g.forward_train(img.view()).is_err());
    assert!(g.predict(img.view()).is_ok());
}
