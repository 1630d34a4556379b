//! Two-stage optimization: the classifier first, then the mask and
//! decomposition networks against the frozen classifier.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointDir, CheckpointManifest, OPTIMIZER_FILE};
use crate::data::loader::{epoch_order, load_positions};
use crate::data::{load_batches, DatasetManifest};
use crate::domain::LossWeights;
use crate::error::{Error, Result};
use crate::eval::metrics::{confusion_matrix, hard_labels, SegMetrics};
use crate::losses::{loss_classifier, loss_classifier_grad, loss_total, loss_total_grad, LossReport};
use crate::models::{Classifier, ClassifierSpec, ModelSpec, Segmenter};
use crate::nn::Gradients;
use crate::optim::{Adam, AdamConfig};
use crate::recompose::average_mask_score;
use crate::scalar::Scalar;

pub const RUNLOG_FILE: &str = "runlog.jsonl";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Classifier,
    Joint,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Classifier => "classifier",
            Stage::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub lambda_m: f64,
    pub lambda_c: f64,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Validate every this many steps in addition to each epoch end; 0 disables.
    pub eval_every: usize,
    pub device: String,
    /// Stop after this many optimizer steps in total.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

impl TrainConfig {
    /// Classifier pretraining: 10 epochs, batch 32, Adam(1e-4, 0.9, 0.999).
    pub fn classifier(checkpoint_dir: impl Into<PathBuf>) -> Self {
        Self {
            stage: Stage::Classifier,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-4,
            adam_betas: (0.9, 0.999),
            lambda_m: 1e-3,
            lambda_c: 1e-3,
            seed: 0,
            checkpoint_dir: checkpoint_dir.into(),
            eval_every: 0,
            device: "cpu".into(),
            max_steps: None,
        }
    }

    /// Joint training: as above with batch 4 and λm = λc = 1e-3.
    pub fn joint(checkpoint_dir: impl Into<PathBuf>) -> Self {
        Self {
            stage: Stage::Joint,
            batch_size: 4,
            ..Self::classifier(checkpoint_dir)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        self.adam().validate()?;
        self.loss_weights().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            ..AdamConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_m: self.lambda_m,
            lambda_c: self.lambda_c,
            eps: LossWeights::DEFAULT_EPS,
        }
    }

    fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage == stage {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "configuration is for the {} stage, not {}",
                self.stage.as_str(),
                stage.as_str()
            )))
        }
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub stage: Stage,
    /// Joint stage: every loss term.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossReport>,
    /// Classifier stage: batch loss and tag accuracy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag_accuracy: Option<f64>,
    /// Batch mean of each class's average mask score.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub y_hat_mean: Vec<f64>,
    pub grad_norm: f64,
    pub batch: Vec<usize>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub epoch: usize,
    pub stage: Stage,
    pub num_images: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_metrics: Option<SegMetrics>,
}

impl ValidationRecord {
    /// Quantity minimized for best-checkpoint selection.
    pub fn objective(&self) -> f64 {
        match (&self.loss, self.classifier_loss) {
            (Some(l), _) => l.total,
            (None, Some(c)) => c,
            _ => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Validation(ValidationRecord),
    ConfigChange { step: u64, field: String, old: String, new: String },
    Checkpoint { step: u64, epoch: usize, label: String },
}

impl LogRecord {
    pub fn step(&self) -> u64 {
        match self {
            LogRecord::Step(r) => r.step,
            LogRecord::Validation(r) => r.step,
            LogRecord::ConfigChange { step, .. } | LogRecord::Checkpoint { step, .. } => *step,
        }
    }
}

/// Append-only training log, mirrored line by line to a file when attached.
#[derive(Debug, Default)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    sink: Option<(PathBuf, fs::File)>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts a log file at `path`, keeping `records` already present.
    pub fn attach(&mut self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
        }
        self.sink = Some((path.to_path_buf(), f));
        Ok(())
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some((path, f)) = &mut self.sink {
            writeln!(f, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { records, sink: None })
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn validations(&self) -> impl Iterator<Item = &ValidationRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Validation(v) => Some(v),
            _ => None,
        })
    }

    /// Records with wall-clock fields zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Vec<LogRecord> {
        self.records
            .iter()
            .cloned()
            .map(|mut r| {
                if let LogRecord::Step(s) = &mut r {
                    s.wall_ms = 0.0;
                }
                r
            })
            .collect()
    }

    /// True when step indices never decrease.
    pub fn is_monotone(&self) -> bool {
        self.records.windows(2).all(|w| w[0].step() <= w[1].step())
    }
}

/// Position in the data stream; with the seed this determines every
/// remaining batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    pub epoch: usize,
    /// Batches already consumed in `epoch`.
    pub batch_in_epoch: usize,
    pub best_val: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainingState {
    config: TrainConfig,
    progress: Progress,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1)
}

fn batches_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn check_manifest(train: &DatasetManifest, k: usize) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Input("training manifest is empty".into()));
    }
    if train.num_classes != k {
        return Err(Error::Input(format!(
            "manifest has K = {}, model expects {k}",
            train.num_classes
        )));
    }
    train.validate()
}

/// Exact-match accuracy of `p > 0.5` against foreground tags.
fn tag_accuracy<T: Scalar>(p: ndarray::ArrayView2<'_, T>, y: ndarray::ArrayView2<'_, T>) -> f64 {
    let n = p.ncols();
    let hits = p
        .outer_iter()
        .zip(y.outer_iter())
        .filter(|(pr, yr)| (0..n).all(|j| (pr[j].as_f64() > 0.5) == (yr[j].as_f64() > 0.0)))
        .count();
    hits as f64 / p.nrows().max(1) as f64
}

fn manifest_base(stage: Stage, k: usize, input: (usize, usize), progress: &Progress, cfg: &TrainConfig, dtype: &str) -> Result<CheckpointManifest> {
    Ok(CheckpointManifest {
        format_version: FORMAT_VERSION,
        stage: stage.as_str().into(),
        num_classes: k,
        input_size: input,
        dtype: dtype.into(),
        model_spec: None,
        classifier_spec: None,
        param_counts: Default::default(),
        layer_table: Vec::new(),
        step: progress.step,
        epoch: progress.epoch,
        classifier_checksum: None,
        training: serde_json::to_value(TrainingState {
            config: cfg.clone(),
            progress: *progress,
        })?,
    })
}

fn read_state(meta: &CheckpointManifest) -> Result<TrainingState> {
    serde_json::from_value(meta.training.clone()).map_err(Error::from)
}

/// Records `ConfigChange` entries for fields that differ between runs.
fn log_config_changes(log: &mut RunLog, step: u64, old: &TrainConfig, new: &TrainConfig) -> Result<()> {
    let pairs: [(&str, String, String); 6] = [
        ("lambda_m", old.lambda_m.to_string(), new.lambda_m.to_string()),
        ("lambda_c", old.lambda_c.to_string(), new.lambda_c.to_string()),
        ("learning_rate", old.learning_rate.to_string(), new.learning_rate.to_string()),
        ("adam_betas", format!("{:?}", old.adam_betas), format!("{:?}", new.adam_betas)),
        ("epochs", old.epochs.to_string(), new.epochs.to_string()),
        ("eval_every", old.eval_every.to_string(), new.eval_every.to_string()),
    ];
    for (field, a, b) in pairs {
        if a != b {
            log::info!("resume: {field} changed from {a} to {b}");
            log.push(LogRecord::ConfigChange {
                step,
                field: field.into(),
                old: a,
                new: b,
            })?;
        }
    }
    Ok(())
}

fn refuse_structural_changes(old: &TrainConfig, new: &TrainConfig) -> Result<()> {
    let mut diffs = Vec::new();
    if old.stage != new.stage {
        diffs.push(format!("stage: {} -> {}", old.stage.as_str(), new.stage.as_str()));
    }
    if old.batch_size != new.batch_size {
        diffs.push(format!("batch_size: {} -> {}", old.batch_size, new.batch_size));
    }
    if old.seed != new.seed {
        diffs.push(format!("seed: {} -> {}", old.seed, new.seed));
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "cannot resume with a different data stream: {}",
            diffs.join(", ")
        )))
    }
}

/// Drives the optimizer over epochs, calling `step` per batch and
/// `validate` / `save` at the configured points.
struct Loop<'a> {
    cfg: &'a TrainConfig,
    n_train: usize,
}

enum Event {
    Step(Vec<usize>),
    Validate,
    EpochEnd,
    Stop,
}

impl Loop<'_> {
    /// Next action from the current position.
    fn next(&self, p: &mut Progress, validated_at: &mut Option<u64>) -> Event {
        if self.cfg.max_steps.is_some_and(|m| p.step >= m) || p.epoch >= self.cfg.epochs {
            return Event::Stop;
        }
        let per_epoch = batches_per_epoch(self.n_train, self.cfg.batch_size);
        if self.cfg.eval_every > 0
            && p.step > 0
            && p.step % self.cfg.eval_every as u64 == 0
            && *validated_at != Some(p.step)
            && p.batch_in_epoch < per_epoch
        {
            *validated_at = Some(p.step);
            return Event::Validate;
        }
        if p.batch_in_epoch >= per_epoch {
            return Event::EpochEnd;
        }
        let order = epoch_order(self.n_train, true, epoch_seed(self.cfg.seed, p.epoch));
        let start = p.batch_in_epoch * self.cfg.batch_size;
        let end = (start + self.cfg.batch_size).min(self.n_train);
        Event::Step(order[start..end].to_vec())
    }
}

/// Classifier pretraining state.
pub struct ClassifierTrainer<T> {
    pub classifier: Classifier<T>,
    pub log: RunLog,
    pub progress: Progress,
    cfg: TrainConfig,
    adam: Adam<T>,
    grads: Gradients<T>,
}

impl<T: Scalar> ClassifierTrainer<T> {
    pub fn new(classifier: Classifier<T>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.expect_stage(Stage::Classifier)?;
        if classifier.is_frozen() {
            return Err(Error::Config("cannot train a frozen classifier".into()));
        }
        let adam = Adam::new(cfg.adam(), classifier.params(), &[""]);
        let grads = classifier.params().zeros_like();
        let mut log = RunLog::new();
        log.attach(&cfg.checkpoint_dir.join(RUNLOG_FILE))?;
        Ok(Self {
            classifier,
            log,
            progress: Progress {
                step: 0,
                epoch: 0,
                batch_in_epoch: 0,
                best_val: None,
            },
            cfg: cfg.clone(),
            adam,
            grads,
        })
    }

    /// Restores weights, optimizer moments and data position from `dir`.
    pub fn resume(dir: &Path, spec: &ClassifierSpec, cfg: &TrainConfig) -> Result<Self> {
        let ck = CheckpointDir::new(dir);
        let meta = ck.manifest()?;
        let saved_spec = meta
            .classifier_spec
            .clone()
            .ok_or_else(|| Error::Load {
                path: dir.to_path_buf(),
                reason: "checkpoint holds no classifier".into(),
            })?;
        if &saved_spec != spec {
            return Err(Error::SpecMismatch(format!("classifier spec {saved_spec:?} != {spec:?}")));
        }
        let state = read_state(&meta)?;
        refuse_structural_changes(&state.config, cfg)?;
        let carried = carried_records(dir, state.progress.step)?;
        let g = checkpoint::load_classifier::<T>(dir, spec)?;
        let mut t = Self::new(g, cfg)?;
        t.adam.import(t.classifier.params(), &checkpoint::read_tensors(&ck.file(OPTIMIZER_FILE))?, meta.step)?;
        t.progress = state.progress;
        t.log.records = carried;
        t.log.attach(&cfg.checkpoint_dir.join(RUNLOG_FILE))?;
        log_config_changes(&mut t.log, t.progress.step, &state.config, cfg)?;
        Ok(t)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save_classifier(dir, &self.classifier)?;
        checkpoint::write_tensors(&dir.join(OPTIMIZER_FILE), &self.adam.export(self.classifier.params()))?;
        let spec = self.classifier.spec();
        let mut meta = manifest_base(Stage::Classifier, spec.num_classes, spec.input_size, &self.progress, &self.cfg, type_name::<T>())?;
        meta.classifier_spec = Some(spec.clone());
        meta.param_counts.insert("classifier".into(), self.classifier.num_params());
        meta.classifier_checksum = Some(self.classifier.checksum());
        meta.write(dir)
    }

    fn checkpoint(&mut self, label: &str) -> Result<()> {
        self.save(&self.cfg.checkpoint_dir.join(label))?;
        self.log.push(LogRecord::Checkpoint {
            step: self.progress.step,
            epoch: self.progress.epoch,
            label: label.into(),
        })
    }

    fn validate(&mut self, val: &DatasetManifest) -> Result<ValidationRecord> {
        let mut loss = 0.0;
        let mut hits = 0.0;
        let mut n = 0usize;
        for batch in load_batches::<T>(val, self.cfg.batch_size, false, 0)? {
            let batch = batch?;
            let b = batch.images.batch_size();
            let p = self.classifier.predict(batch.images.view())?;
            loss += loss_classifier(p.view(), &batch.tags, LossWeights::DEFAULT_EPS)?.as_f64() * b as f64;
            let fg = batch.tags.view();
            let fg = fg.slice(ndarray::s![.., ..p.ncols()]);
            hits += tag_accuracy(p.view(), fg) * b as f64;
            n += b;
        }
        Ok(ValidationRecord {
            step: self.progress.step,
            epoch: self.progress.epoch,
            stage: Stage::Classifier,
            num_images: n,
            loss: None,
            classifier_loss: Some(loss / n as f64),
            tag_accuracy: Some(hits / n as f64),
            seg_metrics: None,
        })
    }

    fn step(&mut self, train: &DatasetManifest, positions: &[usize]) -> Result<()> {
        let t0 = Instant::now();
        let batch = load_positions::<T>(train, positions)?;
        let (p, cache) = self.classifier.forward_train(batch.images.view())?;
        let (loss, dp) = loss_classifier_grad(p.view(), &batch.tags, LossWeights::DEFAULT_EPS)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite classifier loss at step {} on manifest entries {:?}; scores {:?}",
                self.progress.step, batch.indices, p
            )));
        }
        let d_logits = Classifier::probs_to_logit_grad(&cache, dp.view());
        self.grads.zero();
        self.classifier.backward_logits(&cache, &d_logits, Some(&mut self.grads));
        let grad_norm = self.grads.global_norm();
        self.adam.step(self.classifier.params_mut(), &self.grads);
        self.progress.step += 1;
        let fg = batch.tags.view();
        let acc = tag_accuracy(p.view(), fg.slice(ndarray::s![.., ..p.ncols()]));
        self.log.push(LogRecord::Step(StepRecord {
            step: self.progress.step,
            epoch: self.progress.epoch,
            stage: Stage::Classifier,
            loss: None,
            classifier_loss: Some(loss.as_f64()),
            tag_accuracy: Some(acc),
            y_hat_mean: Vec::new(),
            grad_norm,
            batch: batch.indices,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        }))
    }

    /// Trains until the configured epochs (or `max_steps`) are done.
    pub fn run(&mut self, train: &DatasetManifest, val: Option<&DatasetManifest>) -> Result<()> {
        check_manifest(train, self.classifier.spec().num_classes)?;
        let cfg = self.cfg.clone();
        let lp = Loop {
            cfg: &cfg,
            n_train: train.len(),
        };
        let mut validated_at = None;
        loop {
            match lp.next(&mut self.progress, &mut validated_at) {
                Event::Step(pos) => {
                    self.step(train, &pos)?;
                    self.progress.batch_in_epoch += 1;
                }
                Event::Validate => {
                    if let Some(val) = val {
                        let r = self.validate(val)?;
                        self.log.push(LogRecord::Validation(r))?;
                    }
                }
                Event::EpochEnd => {
                    self.progress.epoch += 1;
                    self.progress.batch_in_epoch = 0;
                    self.end_of_epoch(val)?;
                }
                Event::Stop => break,
            }
        }
        self.checkpoint("last")
    }

    fn end_of_epoch(&mut self, val: Option<&DatasetManifest>) -> Result<()> {
        let mut best = false;
        if let Some(val) = val {
            let r = self.validate(val)?;
            log::info!(
                "classifier epoch {}: val loss {:.4}, tag accuracy {:.3}",
                self.progress.epoch,
                r.objective(),
                r.tag_accuracy.unwrap_or(0.0)
            );
            best = self.progress.best_val.is_none_or(|b| r.objective() < b);
            if best {
                self.progress.best_val = Some(r.objective());
            }
            self.log.push(LogRecord::Validation(r))?;
        }
        self.checkpoint(&format!("epoch_{:03}", self.progress.epoch))?;
        if best {
            self.checkpoint("best")?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (Classifier<T>, RunLog) {
        (self.classifier, self.log)
    }
}

/// Trains `g` under the multi-label objective and writes checkpoints under
/// `cfg.checkpoint_dir` (`epoch_NNN`, `best`, `last`).
pub fn train_classifier<T: Scalar>(
    g: Classifier<T>,
    train: &DatasetManifest,
    val: Option<&DatasetManifest>,
    cfg: &TrainConfig,
) -> Result<(Classifier<T>, RunLog)> {
    let mut t = ClassifierTrainer::new(g, cfg)?;
    t.run(train, val)?;
    Ok(t.into_parts())
}

/// Joint optimization of the two networks.
pub struct JointTrainer<T> {
    pub segmenter: Segmenter<T>,
    pub classifier: Classifier<T>,
    pub log: RunLog,
    pub progress: Progress,
    cfg: TrainConfig,
    adam: Adam<T>,
    grads: Gradients<T>,
    classifier_checksum: String,
}

impl<T: Scalar> JointTrainer<T> {
    /// `classifier` must already be frozen.
    pub fn new(segmenter: Segmenter<T>, classifier: Classifier<T>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.expect_stage(Stage::Joint)?;
        if !classifier.is_frozen() {
            return Err(Error::Ordering("the classifier must be trained and frozen before joint training".into()));
        }
        if classifier.spec().num_classes != segmenter.num_classes() {
            return Err(Error::Config(format!(
                "classifier has K = {}, segmenter K = {}",
                classifier.spec().num_classes,
                segmenter.num_classes()
            )));
        }
        // Every segmenter parameter lives under one of the three prefixes.
        let adam = Adam::new(cfg.adam(), segmenter.params(), &[""]);
        let grads = segmenter.params().zeros_like();
        let mut log = RunLog::new();
        log.attach(&cfg.checkpoint_dir.join(RUNLOG_FILE))?;
        let classifier_checksum = classifier.checksum();
        Ok(Self {
            segmenter,
            classifier,
            log,
            progress: Progress {
                step: 0,
                epoch: 0,
                batch_in_epoch: 0,
                best_val: None,
            },
            cfg: cfg.clone(),
            adam,
            grads,
            classifier_checksum,
        })
    }

    /// Restores a joint run. The checkpoint's model spec must equal `spec`;
    /// loss weights and learning rate may change and are logged.
    pub fn resume(dir: &Path, spec: &ModelSpec, cfg: &TrainConfig) -> Result<Self> {
        let ck = CheckpointDir::new(dir);
        let meta = ck.manifest()?;
        let saved = meta.model_spec.clone().ok_or_else(|| Error::Load {
            path: dir.to_path_buf(),
            reason: "checkpoint holds no segmentation model".into(),
        })?;
        if &saved != spec {
            return Err(Error::SpecMismatch(saved.diff(spec).join("\n")));
        }
        let cspec = meta.classifier_spec.clone().ok_or_else(|| Error::Load {
            path: dir.to_path_buf(),
            reason: "joint checkpoint lacks the classifier".into(),
        })?;
        let state = read_state(&meta)?;
        refuse_structural_changes(&state.config, cfg)?;
        let seg = checkpoint::load_segmenter::<T>(dir, spec)?;
        let mut g = checkpoint::load_classifier::<T>(dir, &cspec)?;
        g.freeze();
        let carried = carried_records(dir, state.progress.step)?;
        let mut t = Self::new(seg, g, cfg)?;
        t.adam.import(t.segmenter.params(), &checkpoint::read_tensors(&ck.file(OPTIMIZER_FILE))?, meta.step)?;
        t.progress = state.progress;
        t.log.records = carried;
        t.log.attach(&cfg.checkpoint_dir.join(RUNLOG_FILE))?;
        log_config_changes(&mut t.log, t.progress.step, &state.config, cfg)?;
        Ok(t)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save_segmenter(dir, &self.segmenter)?;
        checkpoint::save_classifier(dir, &self.classifier)?;
        checkpoint::write_tensors(&dir.join(OPTIMIZER_FILE), &self.adam.export(self.segmenter.params()))?;
        let spec = self.segmenter.spec();
        let (_, h, w) = spec.input_size;
        let mut meta = manifest_base(Stage::Joint, spec.num_classes, (h, w), &self.progress, &self.cfg, type_name::<T>())?;
        meta.model_spec = Some(spec.clone());
        meta.classifier_spec = Some(self.classifier.spec().clone());
        meta.param_counts = checkpoint::param_counts(spec)?;
        meta.param_counts.insert("classifier".into(), self.classifier.num_params());
        meta.layer_table = checkpoint::layer_table(spec)?;
        meta.classifier_checksum = Some(self.classifier.checksum());
        meta.write(dir)
    }

    fn checkpoint(&mut self, label: &str) -> Result<()> {
        self.save(&self.cfg.checkpoint_dir.join(label))?;
        self.log.push(LogRecord::Checkpoint {
            step: self.progress.step,
            epoch: self.progress.epoch,
            label: label.into(),
        })
    }

    fn validate(&mut self, val: &DatasetManifest) -> Result<ValidationRecord> {
        let weights = self.cfg.loss_weights();
        let k = self.segmenter.num_classes();
        let mut sums = [0.0f64; 3];
        let mut mask_pc = vec![0.0; k];
        let mut cls_pc = vec![0.0; k];
        let mut n = 0usize;
        let mut confusion = val.has_masks().then(|| ndarray::Array2::<u64>::zeros((k, k)));
        for batch in load_batches::<T>(val, self.cfg.batch_size, false, 0)? {
            let batch = batch?;
            let b = batch.images.batch_size() as f64;
            let (m, x, _) = self.segmenter.forward_pair(&batch.images)?;
            let r = loss_total(&m, &x, &batch.images, &batch.tags, &self.classifier, &weights)?;
            sums[0] += r.recon * b;
            sums[1] += r.mask * b;
            sums[2] += r.cls * b;
            for c in 0..k {
                mask_pc[c] += r.mask_per_class[c] * b;
                cls_pc[c] += r.cls_per_class[c] * b;
            }
            n += batch.images.batch_size();
            if let (Some(c), Some(truth)) = (confusion.as_mut(), &batch.masks) {
                *c += &confusion_matrix(hard_labels(&m).view(), truth.view(), k)?;
            }
        }
        if n == 0 {
            return Err(Error::Input("validation manifest is empty".into()));
        }
        let nf = n as f64;
        let (recon, mask, cls) = (sums[0] / nf, sums[1] / nf, sums[2] / nf);
        let loss = LossReport {
            recon,
            mask,
            cls,
            total: recon + weights.lambda_m * mask + weights.lambda_c * cls,
            lambda_m: weights.lambda_m,
            lambda_c: weights.lambda_c,
            mask_per_class: mask_pc.iter().map(|v| v / nf).collect(),
            cls_per_class: cls_pc.iter().map(|v| v / nf).collect(),
        };
        Ok(ValidationRecord {
            step: self.progress.step,
            epoch: self.progress.epoch,
            stage: Stage::Joint,
            num_images: n,
            loss: Some(loss),
            classifier_loss: None,
            tag_accuracy: None,
            seg_metrics: confusion.map(|c| SegMetrics::from_confusion(&c)),
        })
    }

    fn step(&mut self, train: &DatasetManifest, positions: &[usize]) -> Result<()> {
        let t0 = Instant::now();
        let batch = load_positions::<T>(train, positions)?;
        let (m, x, cache) = self.segmenter.forward_pair(&batch.images)?;
        let weights = self.cfg.loss_weights();
        let g = loss_total_grad(&m, &x, &batch.images, &batch.tags, &self.classifier, &weights)?;
        if !g.report.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {} on manifest entries {:?}: recon {}, mask {}, cls {}",
                self.progress.step, batch.indices, g.report.recon, g.report.mask, g.report.cls
            )));
        }
        self.grads.zero();
        self.segmenter.backward_pair(&cache, &g.d_mask, &g.d_decomposition, &mut self.grads);
        let grad_norm = self.grads.global_norm();
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at step {} on manifest entries {:?}",
                self.progress.step, batch.indices
            )));
        }
        self.adam.step(self.segmenter.params_mut(), &self.grads);
        self.progress.step += 1;
        let y_hat = average_mask_score(&m);
        let y_hat_mean = y_hat.mean_axis(Axis(0)).expect("nonempty batch").iter().map(|v| v.as_f64()).collect();
        self.log.push(LogRecord::Step(StepRecord {
            step: self.progress.step,
            epoch: self.progress.epoch,
            stage: Stage::Joint,
            loss: Some(g.report),
            classifier_loss: None,
            tag_accuracy: None,
            y_hat_mean,
            grad_norm,
            batch: batch.indices,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        }))
    }

    fn end_of_epoch(&mut self, val: Option<&DatasetManifest>) -> Result<()> {
        let mut best = false;
        if let Some(val) = val {
            let r = self.validate(val)?;
            log::info!(
                "joint epoch {}: val total {:.5}, foreground IoU {:?}",
                self.progress.epoch,
                r.objective(),
                r.seg_metrics.as_ref().and_then(|m| m.per_class_iou.first().copied().flatten())
            );
            best = self.progress.best_val.is_none_or(|b| r.objective() < b);
            if best {
                self.progress.best_val = Some(r.objective());
            }
            self.log.push(LogRecord::Validation(r))?;
        }
        self.checkpoint(&format!("epoch_{:03}", self.progress.epoch))?;
        if best {
            self.checkpoint("best")?;
        }
        Ok(())
    }

    pub fn run(&mut self, train: &DatasetManifest, val: Option<&DatasetManifest>) -> Result<()> {
        check_manifest(train, self.segmenter.num_classes())?;
        let cfg = self.cfg.clone();
        let lp = Loop {
            cfg: &cfg,
            n_train: train.len(),
        };
        let mut validated_at = None;
        loop {
            match lp.next(&mut self.progress, &mut validated_at) {
                Event::Step(pos) => {
                    self.step(train, &pos)?;
                    self.progress.batch_in_epoch += 1;
                }
                Event::Validate => {
                    if let Some(val) = val {
                        let r = self.validate(val)?;
                        self.log.push(LogRecord::Validation(r))?;
                    }
                }
                Event::EpochEnd => {
                    self.progress.epoch += 1;
                    self.progress.batch_in_epoch = 0;
                    self.end_of_epoch(val)?;
                }
                Event::Stop => break,
            }
        }
        if self.classifier.checksum() != self.classifier_checksum {
            return Err(Error::Numeric("classifier parameters changed during joint training".into()));
        }
        self.checkpoint("last")
    }

    pub fn classifier_checksum(&self) -> &str {
        &self.classifier_checksum
    }

    pub fn into_parts(self) -> (Segmenter<T>, RunLog) {
        (self.segmenter, self.log)
    }
}

/// Trains `f_m`/`f_x` against the frozen `g`; checkpoints under
/// `cfg.checkpoint_dir`.
pub fn train_joint<T: Scalar>(
    segmenter: Segmenter<T>,
    g: &Classifier<T>,
    train: &DatasetManifest,
    val: Option<&DatasetManifest>,
    cfg: &TrainConfig,
) -> Result<(Segmenter<T>, RunLog)> {
    let mut t = JointTrainer::new(segmenter, g.clone(), cfg)?;
    t.run(train, val)?;
    Ok(t.into_parts())
}

/// Log records of the interrupted run up to `step`.
fn carried_records(dir: &Path, step: u64) -> Result<Vec<LogRecord>> {
    let candidates = [dir.join(RUNLOG_FILE), dir.parent().map(|p| p.join(RUNLOG_FILE)).unwrap_or_default()];
    match candidates.iter().find(|p| p.is_file()) {
        Some(path) => Ok(RunLog::read(path)?.records.into_iter().filter(|r| r.step() <= step).collect()),
        None => Ok(Vec::new()),
    }
}

fn type_name<T: Scalar>() -> &'static str {
    match T::DTYPE {
        safetensors::Dtype::F64 => "f64",
        _ => "f32",
    }
}
