//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use decompseg::checkpoint::{self, CheckpointDir, MANIFEST_FILE};
use decompseg::data::{derive_tagged_dataset, generate_synthetic, load_image, stratified_split, DatasetManifest, DeriveParams};
use decompseg::eval::{evaluate_run, hard_labels, overlay, to_rgb_image, EvalOptions};
use decompseg::models::{build_classifier, check_arch as arch_report, Segmenter};
use decompseg::training::{ClassifierTrainer, JointTrainer, Stage, TrainConfig};
use decompseg::{Error, ImageBatch};
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{FileConfig, RunConfig, Scale};
use crate::error::{CliError, InStage, StageError};
use crate::{CheckArchArgs, DeriveArgs, EvalArgs, Hyper, PredictArgs, SynthArgs, TrainArgs, TrainClassifierArgs};

type Outcome = std::result::Result<(), StageError>;

fn usage(stage: &'static str, msg: impl Into<String>) -> StageError {
    StageError {
        stage,
        error: CliError::Usage(msg.into()),
    }
}

/// A checkpoint directory itself, or the `best`/`last` checkpoint of a run.
pub fn resolve_checkpoint(dir: &Path) -> Option<PathBuf> {
    [dir.to_path_buf(), dir.join("best"), dir.join("last")]
        .into_iter()
        .find(|d| d.join(MANIFEST_FILE).is_file())
}

fn read_manifest(path: &Path, stage: &'static str) -> std::result::Result<DatasetManifest, StageError> {
    let m = DatasetManifest::read(path).in_stage(stage)?;
    m.check_files().in_stage(stage)?;
    Ok(m)
}

pub fn derive_data(a: DeriveArgs, root: &Path) -> Outcome {
    let stage = "derive-data";
    let n_pos = a.n_pos.or(a.n).ok_or_else(|| usage(stage, "--n or --n-pos is required"))?;
    let n_neg = a.n_neg.or(a.n).ok_or_else(|| usage(stage, "--n or --n-neg is required"))?;
    let out = a.out.unwrap_or_else(|| root.join("data"));
    let params = DeriveParams {
        n_pos,
        n_neg,
        size: (a.size, a.size),
        split_ratio: a.split,
        seed: a.seed,
    };
    let (train, val) = derive_tagged_dataset(&a.pos, &a.neg, &params, &out).in_stage(stage)?;
    println!(
        "wrote {} train / {} val images to {}",
        train.len(),
        val.len(),
        out.display()
    );
    Ok(())
}

pub fn gen_synth(a: SynthArgs, root: &Path) -> Outcome {
    let stage = "gen-synth";
    let file = FileConfig::load(a.config.as_deref()).in_stage(stage)?;
    let mut params = file.synth.unwrap_or_default();
    if let Some(s) = a.size {
        params.canvas_size = (s, s);
    }
    if let Some(c) = a.classes {
        params.num_foreground_classes = c;
    }
    if let Some(p) = a.presence {
        params.foreground_presence_probability = p;
    }
    params.correlated_nuisance |= a.nuisance;
    let out = a.out.unwrap_or_else(|| root.join("synth"));

    let cfg = RunConfig {
        command: stage.into(),
        scale: Scale::Desk,
        seed: a.seed,
        run_dir: out.clone(),
        train_manifest: Some(out.join("train.jsonl")),
        val_manifest: Some(out.join("val.jsonl")),
        classifier_checkpoint: None,
        resume: None,
        pretrained: false,
        weights: None,
        train: None,
        synth: Some(params.clone()),
    };
    params.validate().in_stage(stage)?;
    cfg.persist().in_stage(stage)?;
    let pool = generate_synthetic(&params, a.n as usize, a.seed, &out).in_stage(stage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (train, val) = stratified_split(&pool, a.split, &mut rng).in_stage(stage)?;
    pool.write(&out.join("all.jsonl")).in_stage(stage)?;
    train.write(&out.join("train.jsonl")).in_stage(stage)?;
    val.write(&out.join("val.jsonl")).in_stage(stage)?;
    println!(
        "wrote {} scenes ({} train / {} val) to {}",
        pool.len(),
        train.len(),
        val.len(),
        out.display()
    );
    Ok(())
}

/// Merges defaults, the config file and flags, in increasing precedence.
fn resolve_train(
    stage: &'static str,
    mut base: TrainConfig,
    h: &Hyper,
    file: &FileConfig,
    root: &Path,
    default_run: &str,
) -> std::result::Result<(TrainConfig, Scale, u64, PathBuf), StageError> {
    file.train.apply(&mut base);
    if let Some(s) = file.seed {
        base.seed = s;
    }
    macro_rules! flag {
        ($src:expr => $dst:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    flag!(h.epochs => base.epochs);
    flag!(h.batch_size => base.batch_size);
    flag!(h.lr => base.learning_rate);
    flag!(h.beta1 => base.adam_betas.0);
    flag!(h.beta2 => base.adam_betas.1);
    flag!(h.seed => base.seed);
    flag!(h.eval_every => base.eval_every);
    if h.max_steps.is_some() {
        base.max_steps = h.max_steps;
    }
    let run_dir = match (&h.out, &h.run) {
        (Some(out), _) => out.clone(),
        (None, Some(run)) => root.join(run),
        (None, None) => root.join(default_run),
    };
    base.checkpoint_dir = run_dir.clone();
    base.validate().map_err(|e| usage(stage, e.to_string()))?;
    let scale = h.scale.or(file.scale).unwrap_or(Scale::Desk);
    Ok((base.clone(), scale, base.seed, run_dir))
}

fn manifests(
    stage: &'static str,
    train: Option<PathBuf>,
    val: Option<PathBuf>,
    file: &FileConfig,
) -> std::result::Result<(PathBuf, Option<PathBuf>), StageError> {
    let train = train
        .or_else(|| file.train_manifest.clone())
        .ok_or_else(|| usage(stage, "a training manifest is required (--train)"))?;
    Ok((train, val.or_else(|| file.val_manifest.clone())))
}

pub fn train_classifier(a: TrainClassifierArgs, root: &Path) -> Outcome {
    let stage = "train-classifier";
    let file = FileConfig::load(a.hyper.config.as_deref()).in_stage(stage)?;
    let (train_path, val_path) = manifests(stage, a.train, a.val, &file)?;
    let (cfg, scale, seed, run_dir) =
        resolve_train(stage, TrainConfig::classifier(""), &a.hyper, &file, root, "classifier")?;
    let pretrained = a.pretrained || file.pretrained.unwrap_or(false);
    let weights = a.weights.or_else(|| file.weights.clone());
    let run = RunConfig {
        command: stage.into(),
        scale,
        seed,
        run_dir: run_dir.clone(),
        train_manifest: Some(train_path.clone()),
        val_manifest: val_path.clone(),
        classifier_checkpoint: None,
        resume: a.hyper.resume.clone(),
        pretrained,
        weights: weights.clone(),
        train: Some(cfg.clone()),
        synth: None,
    };

    let train = read_manifest(&train_path, "loading training manifest")?;
    let val = val_path
        .as_deref()
        .map(|p| read_manifest(p, "loading validation manifest"))
        .transpose()?;
    let spec = scale.classifier_spec(train.num_classes);
    run.persist().in_stage(stage)?;

    let mut trainer = match &a.hyper.resume {
        Some(dir) => {
            let ck = resolve_checkpoint(dir).ok_or_else(|| {
                usage(stage, format!("no checkpoint under {}", dir.display()))
            })?;
            ClassifierTrainer::<f32>::resume(&ck, &spec, &cfg).in_stage("resuming classifier")?
        }
        None => {
            let g = build_classifier::<f32>(&spec, pretrained, weights.as_deref(), seed)
                .in_stage("building classifier")?;
            ClassifierTrainer::new(g, &cfg).in_stage(stage)?
        }
    };
    trainer.run(&train, val.as_ref()).in_stage("classifier training")?;
    if let Some(v) = trainer.log.validations().last() {
        println!(
            "classifier: epoch {} val loss {:.4} tag accuracy {}",
            v.epoch,
            v.objective(),
            v.tag_accuracy.map_or("n/a".into(), |a| format!("{a:.4}"))
        );
    }
    println!("checkpoints in {}", run_dir.display());
    Ok(())
}

pub fn train(a: TrainArgs, root: &Path) -> Outcome {
    let stage = "train";
    let file = FileConfig::load(a.hyper.config.as_deref()).in_stage(stage)?;
    let (train_path, val_path) = manifests(stage, a.train, a.val, &file)?;
    let (mut cfg, scale, seed, run_dir) =
        resolve_train(stage, TrainConfig::joint(""), &a.hyper, &file, root, "joint")?;
    if let Some(v) = a.lambda_m {
        cfg.lambda_m = v;
    }
    if let Some(v) = a.lambda_c {
        cfg.lambda_c = v;
    }
    cfg.validate().map_err(|e| usage(stage, e.to_string()))?;
    let classifier_dir = a.classifier.or_else(|| file.classifier_checkpoint.clone());

    let train = read_manifest(&train_path, "loading training manifest")?;
    let val = val_path
        .as_deref()
        .map(|p| read_manifest(p, "loading validation manifest"))
        .transpose()?;
    let spec = scale.model_spec(train.num_classes).in_stage("building model spec")?;

    let mut trainer = match &a.hyper.resume {
        Some(dir) => {
            let ck = resolve_checkpoint(dir).ok_or_else(|| {
                usage(stage, format!("no checkpoint under {}", dir.display()))
            })?;
            write_run_config(stage, &cfg, scale, seed, &run_dir, &train_path, &val_path, None, Some(dir))?;
            JointTrainer::<f32>::resume(&ck, &spec, &cfg).in_stage("resuming joint training")?
        }
        None => {
            let ck = classifier_dir
                .as_deref()
                .and_then(resolve_checkpoint)
                .filter(|d| CheckpointDir::new(d).has_classifier())
                .ok_or_else(|| StageError {
                    stage: "loading classifier",
                    error: Error::Ordering(format!(
                        "no classifier checkpoint at {}; train-classifier must run first",
                        classifier_dir.as_deref().map_or("<none>".into(), |p| p.display().to_string())
                    ))
                    .into(),
                })?;
            let meta = CheckpointDir::new(&ck).manifest().in_stage("loading classifier")?;
            let cspec = meta.classifier_spec.ok_or_else(|| StageError {
                stage: "loading classifier",
                error: Error::Ordering("checkpoint holds no classifier; train-classifier must run first".into()).into(),
            })?;
            let mut g = checkpoint::load_classifier::<f32>(&ck, &cspec).in_stage("loading classifier")?;
            g.freeze();
            write_run_config(stage, &cfg, scale, seed, &run_dir, &train_path, &val_path, Some(&ck), None)?;
            let seg = Segmenter::<f32>::build(&spec, seed).in_stage("building segmenter")?;
            JointTrainer::new(seg, g, &cfg).in_stage(stage)?
        }
    };
    trainer.run(&train, val.as_ref()).in_stage("joint training")?;
    if let Some(v) = trainer.log.validations().last() {
        let iou = v.seg_metrics.as_ref().map(|m| m.mean_iou);
        println!(
            "joint: epoch {} val objective {:.5} mean IoU {}",
            v.epoch,
            v.objective(),
            iou.map_or("n/a".into(), |x| format!("{x:.4}"))
        );
    }
    println!("checkpoints in {}", run_dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn write_run_config(
    stage: &'static str,
    cfg: &TrainConfig,
    scale: Scale,
    seed: u64,
    run_dir: &Path,
    train: &Path,
    val: &Option<PathBuf>,
    classifier: Option<&Path>,
    resume: Option<&Path>,
) -> Outcome {
    debug_assert_eq!(cfg.stage, Stage::Joint);
    RunConfig {
        command: stage.into(),
        scale,
        seed,
        run_dir: run_dir.to_path_buf(),
        train_manifest: Some(train.to_path_buf()),
        val_manifest: val.clone(),
        classifier_checkpoint: classifier.map(Path::to_path_buf),
        resume: resume.map(Path::to_path_buf),
        pretrained: false,
        weights: None,
        train: Some(cfg.clone()),
        synth: None,
    }
    .persist()
    .in_stage(stage)
    .map(|_| ())
}

pub fn eval(a: EvalArgs) -> Outcome {
    let stage = "eval";
    let ck = resolve_checkpoint(&a.checkpoint)
        .ok_or_else(|| usage(stage, format!("no checkpoint under {}", a.checkpoint.display())))?;
    let manifest = read_manifest(&a.manifest, "loading manifest")?;
    let opts = EvalOptions {
        out_dir: a.out.unwrap_or_else(|| a.checkpoint.join("eval")),
        run_id: a.run_id,
        seed: a.seed,
        figure_samples: a.samples,
        fp_area_threshold: a.fp_threshold,
        write_figures: !a.no_figures,
        ..EvalOptions::default()
    };
    let report = evaluate_run(&ck, &manifest, &opts).in_stage("evaluation")?;
    print!("{}", report.to_table());
    for f in &report.figures {
        println!("figure {}", f.display());
    }
    println!("report in {}", opts.out_dir.display());
    Ok(())
}

pub fn predict(a: PredictArgs) -> Outcome {
    let stage = "predict";
    let ck = resolve_checkpoint(&a.checkpoint)
        .ok_or_else(|| usage(stage, format!("no checkpoint under {}", a.checkpoint.display())))?;
    let meta = CheckpointDir::new(&ck).manifest().in_stage("loading checkpoint")?;
    let spec = meta.model_spec.ok_or_else(|| StageError {
        stage: "loading checkpoint",
        error: Error::Input(format!("{} holds no segmentation model", ck.display())).into(),
    })?;
    let seg = checkpoint::load_segmenter::<f32>(&ck, &spec).in_stage("loading checkpoint")?;
    let (_, h, w) = spec.input_size;
    let img = load_image::<f32>(&a.image, (h, w)).in_stage("loading image")?;
    let batch = ImageBatch::new(img.insert_axis(Axis(0))).in_stage("loading image")?;
    let labels = hard_labels(&seg.predict_mask(&batch).in_stage("inference")?);
    let background = (spec.num_classes - 1) as u8;

    let out = a
        .out
        .or_else(|| a.image.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e)).in_stage(stage)?;
    let stem = a.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let label_path = out.join(format!("{stem}_labels.png"));
    let overlay_path = out.join(format!("{stem}_overlay.png"));
    let label_img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([labels[[0, y as usize, x as usize]]]));
    label_img.save(&label_path).map_err(Error::from).in_stage("writing label map")?;
    let rgb = to_rgb_image(batch.view().index_axis(Axis(0), 0));
    overlay(&rgb, labels.view(), 0, background)
        .save(&overlay_path)
        .map_err(Error::from)
        .in_stage("writing overlay")?;

    let pixels = (h * w) as f64;
    for c in 0..spec.num_classes {
        let area = labels.iter().filter(|&&v| v as usize == c).count() as f64 / pixels;
        let name = if c as u8 == background { "bg".to_string() } else { c.to_string() };
        println!("class {name:<3} area {area:.4}");
    }
    println!("label map {}", label_path.display());
    println!("overlay {}", overlay_path.display());
    Ok(())
}

pub fn check_arch(a: CheckArchArgs) -> Outcome {
    let stage = "check-arch";
    let spec = a.scale.model_spec(a.classes).in_stage(stage)?;
    let report = arch_report(&spec).in_stage(stage)?;
    if a.json {
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| CliError::Runtime(e.to_string()))
            .in_stage(stage)?;
        println!("{text}");
    } else {
        print!("{}", report.to_table());
    }
    if report.all_match() {
        Ok(())
    } else {
        Err(StageError {
            stage,
            error: CliError::Runtime(format!("{} mismatch(es) against the reference tables", report.mismatches.len())),
        })
    }
}
