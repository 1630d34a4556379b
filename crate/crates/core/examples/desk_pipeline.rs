//! Synthetic data, classifier pretraining, joint training and evaluation at
//! desk scale. Usage:
//! `desk_pipeline <out_dir> [n_images] [classifier_epochs] [joint_epochs] [lambda_m] [lambda_c]`.

use std::path::PathBuf;
use std::time::Instant;

use decompseg::data::{generate_synthetic, stratified_split, SyntheticSceneParams};
use decompseg::eval::{evaluate_segmenter, EvalOptions};
use decompseg::models::{Classifier, ClassifierSpec, ModelSpec, Segmenter};
use decompseg::training::{train_classifier, train_joint, TrainConfig};
use rand::SeedableRng;

fn main() -> decompseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "desk_run".into()));
    let n: usize = args.next().map_or(2000, |v| v.parse().expect("n_images"));
    let cls_epochs: usize = args.next().map_or(10, |v| v.parse().expect("classifier epochs"));
    let joint_epochs: usize = args.next().map_or(10, |v| v.parse().expect("joint epochs"));
    let lambda_m: Option<f64> = args.next().map(|v| v.parse().expect("lambda_m"));
    let lambda_c: Option<f64> = args.next().map(|v| v.parse().expect("lambda_c"));

    let t = Instant::now();
    let params = SyntheticSceneParams::default();
    let pool = generate_synthetic(&params, n, 7, &out.join("data"))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let (train, val) = stratified_split(&pool, 0.8, &mut rng)?;
    println!("data: {} train / {} val in {:.1}s", train.len(), val.len(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut ccfg = TrainConfig::classifier(out.join("classifier"));
    ccfg.epochs = cls_epochs;
    let g = Classifier::<f32>::build(&ClassifierSpec::desk(2), 1)?;
    let (mut g, log) = train_classifier(g, &train, Some(&val), &ccfg)?;
    for v in log.validations() {
        println!("classifier epoch {} val loss {:.4} acc {:.3}", v.epoch, v.objective(), v.tag_accuracy.unwrap_or(0.0));
    }
    println!("classifier: {:.1}s", t.elapsed().as_secs_f64());
    g.freeze();

    let spec = ModelSpec::desk(2)?;
    let seg = Segmenter::<f32>::build(&spec, 2)?;
    let opts = EvalOptions {
        out_dir: out.join("eval"),
        run_id: "untrained".into(),
        ..Default::default()
    };
    let base = evaluate_segmenter(&seg, Some(&g), &val, &opts)?;
    println!("baseline:\n{}", base.to_table());

    let t = Instant::now();
    let mut jcfg = TrainConfig::joint(out.join("joint"));
    jcfg.epochs = joint_epochs;
    jcfg.lambda_m = lambda_m.unwrap_or(jcfg.lambda_m);
    jcfg.lambda_c = lambda_c.unwrap_or(jcfg.lambda_c);
    let (seg, log) = train_joint(seg, &g, &train, Some(&val), &jcfg)?;
    for v in log.validations() {
        let iou = v.seg_metrics.as_ref().and_then(|m| m.per_class_iou[0]);
        println!("joint epoch {} val total {:.5} fg IoU {:?}", v.epoch, v.objective(), iou);
    }
    println!("joint: {:.1}s", t.elapsed().as_secs_f64());
    let opts = EvalOptions {
        run_id: "trained".into(),
        ..opts
    };
    let report = evaluate_segmenter(&seg, Some(&g), &val, &opts)?;
    println!("trained:\n{}", report.to_table());
    Ok(())
}
