//! Resolved run configuration and its optional TOML overlay.

use std::fs;
use std::path::{Path, PathBuf};

use decompseg::data::SyntheticSceneParams;
use decompseg::models::{ClassifierSpec, ModelSpec};
use decompseg::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const OUT_ROOT_ENV: &str = "DECOMPSEG_OUT_ROOT";
pub const DEFAULT_OUT_ROOT: &str = "runs";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// 64×64 input, widths divided by eight.
    Desk,
    /// 224×224 input at full width.
    Paper,
}

impl Scale {
    pub fn model_spec(self, num_classes: usize) -> decompseg::Result<ModelSpec> {
        match self {
            Scale::Desk => ModelSpec::desk(num_classes),
            Scale::Paper => ModelSpec::paper(num_classes),
        }
    }

    pub fn classifier_spec(self, num_classes: usize) -> ClassifierSpec {
        match self {
            Scale::Desk => ClassifierSpec::desk(num_classes),
            Scale::Paper => ClassifierSpec::standard(num_classes),
        }
    }
}

/// Everything a command needs, fully resolved before it runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub scale: Scale,
    pub seed: u64,
    pub run_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    #[serde(default)]
    pub pretrained: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SyntheticSceneParams>,
}

impl RunConfig {
    /// Writes the resolved configuration into the run directory.
    pub fn persist(&self) -> CliResult<PathBuf> {
        fs::create_dir_all(&self.run_dir).map_err(|e| CliError::io(&self.run_dir, e))?;
        let path = self.run_dir.join(CONFIG_FILE);
        let text = toml::to_string_pretty(self).map_err(|e| CliError::Runtime(format!("serializing config: {e}")))?;
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// Training fields a config file may set; flags take precedence.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverlay {
    // Accepted so persisted configs parse; the command fixes the stage and
    // the run directory.
    #[allow(dead_code)]
    pub stage: Option<decompseg::training::Stage>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub adam_betas: Option<(f64, f64)>,
    pub lambda_m: Option<f64>,
    pub lambda_c: Option<f64>,
    pub seed: Option<u64>,
    #[allow(dead_code)]
    pub checkpoint_dir: Option<PathBuf>,
    pub eval_every: Option<usize>,
    pub device: Option<String>,
    pub max_steps: Option<u64>,
}

impl TrainOverlay {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! take {
            ($($f:ident),*) => {$(if let Some(v) = self.$f.clone() { cfg.$f = v; })*};
        }
        take!(epochs, batch_size, learning_rate, adam_betas, lambda_m, lambda_c, seed, eval_every, device);
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
    }
}

/// Optional config file. A persisted [`RunConfig`] parses as one too.
#[derive(Debug, Clone, Default, Deserialize)]
pub struct FileConfig {
    pub scale: Option<Scale>,
    pub seed: Option<u64>,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub classifier_checkpoint: Option<PathBuf>,
    pub pretrained: Option<bool>,
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainOverlay,
    pub synth: Option<SyntheticSceneParams>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// `--out-root`, else the environment variable, else `runs`.
pub fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}
