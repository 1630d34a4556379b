//! `decompseg`: data preparation, training, evaluation and inspection.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Scale, OUT_ROOT_ENV};

#[derive(Debug, Parser)]
#[command(name = "decompseg", version, about = "Weakly supervised segmentation by image decomposition")]
struct Cli {
    /// Root under which run directories are created by default.
    #[arg(long, global = true, env = OUT_ROOT_ENV)]
    out_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a tagged dataset from directories of positive and negative images.
    DeriveData(DeriveArgs),
    /// Render synthetic scenes with ground-truth masks.
    GenSynth(SynthArgs),
    /// Train the multi-label classifier.
    TrainClassifier(TrainClassifierArgs),
    /// Train the mask and decomposition networks against a frozen classifier.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Segment a single image.
    Predict(PredictArgs),
    /// Print per-layer parameter counts and compare them with the reference tables.
    CheckArch(CheckArchArgs),
}

#[derive(Debug, Args)]
pub struct DeriveArgs {
    /// Directory of images containing the foreground class.
    #[arg(long)]
    pub pos: PathBuf,
    /// Directory of images without it.
    #[arg(long)]
    pub neg: PathBuf,
    /// Images drawn from each directory.
    #[arg(long, required_unless_present_all = ["n_pos", "n_neg"])]
    pub n: Option<usize>,
    #[arg(long)]
    pub n_pos: Option<usize>,
    #[arg(long)]
    pub n_neg: Option<usize>,
    #[arg(long, default_value_t = 224)]
    pub size: usize,
    /// Training share of the pool.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; defaults to `<out-root>/data`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long)]
    pub size: Option<usize>,
    /// Foreground classes; the background is added on top.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub presence: Option<f64>,
    /// Draw a background distractor correlated with foreground presence.
    #[arg(long)]
    pub nuisance: bool,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// TOML file whose `[synth]` table sets scene parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to `<out-root>/synth`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Hyper {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also validate every this many steps.
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long, value_enum)]
    pub scale: Option<Scale>,
    /// TOML configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory; defaults to `<out-root>/<run>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run name under the output root.
    #[arg(long)]
    pub run: Option<String>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainClassifierArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Start from ImageNet weights (file from `--weights` or the environment).
    #[arg(long)]
    pub pretrained: bool,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Classifier run or checkpoint directory.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub lambda_m: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run or checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report directory; defaults to `<checkpoint>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    pub run_id: String,
    /// Seed for figure sample selection.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Samples per population figure.
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    /// Foreground area above which an absent image counts as a false positive.
    #[arg(long, default_value_t = 0.01)]
    pub fp_threshold: f64,
    #[arg(long)]
    pub no_figures: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Directory for the label map and overlay; defaults to the image's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArchArgs {
    #[arg(long, value_enum, default_value = "paper")]
    pub scale: Scale,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let root = config::out_root(cli.out_root);
    let result = match cli.command {
        Command::DeriveData(a) => commands::derive_data(a, &root),
        Command::GenSynth(a) => commands::gen_synth(a, &root),
        Command::TrainClassifier(a) => commands::train_classifier(a, &root),
        Command::Train(a) => commands::train(a, &root),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::CheckArch(a) => commands::check_arch(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.stage, e.error);
            ExitCode::from(e.error.exit_code())
        }
    }
}
