use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentationConfig, Task};
use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::train::{TrainConfig, TrainMode};
use crate::weights::ImportPolicy;

pub const CONFIG_VERSION: u32 = 1;
/// File name of the resolved-config echo in every output directory.
pub const ECHO_FILE: &str = "config.resolved.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Optimizer settings of a run; mode and seed live at the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            epochs: d.epochs,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// 9 for the 3x3 crop grid, 1 for a single centre crop.
    pub crops: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { crops: 9 }
    }
}

/// A cross-validation run as written in a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub task: Task,
    pub preset: String,
    pub mode: TrainMode,
    #[serde(default)]
    pub seed: u64,
    /// Manifest file or the directory holding `manifest.tsv`.
    pub manifest: PathBuf,
    /// Pretrained container; required for finetune, forbidden for scratch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    pub out: PathBuf,
    /// Table row label; derived from preset and mode when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub augment: AugmentationConfig,
    #[serde(default)]
    pub evaluate: EvalSection,
    #[serde(default)]
    pub import: ImportPolicy,
}

impl RunConfig {
    /// Minimal config with every optional field at its default.
    pub fn new(task: Task, preset: &str, mode: TrainMode, manifest: PathBuf, out: PathBuf) -> Self {
        Self {
            version: CONFIG_VERSION,
            task,
            preset: preset.to_string(),
            mode,
            seed: 0,
            manifest,
            weights: None,
            out,
            label: None,
            precision: Precision::default(),
            train: TrainSection::default(),
            augment: AugmentationConfig::default(),
            evaluate: EvalSection::default(),
            import: ImportPolicy::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Reads a config file; relative paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(d) => Error::Config(format!("{}: {d}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let join = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        self.manifest = join(&self.manifest);
        self.out = join(&self.out);
        self.weights = self.weights.as_deref().map(join);
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            epsilon: self.train.epsilon,
            mode: self.mode,
            master_seed: self.seed,
        }
    }

    /// Row label such as "Dense TL" or "SE-RX SRC".
    pub fn variant(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let family = if self.preset.contains("densenet") {
            "Dense"
        } else if self.preset.contains("se_resnext") {
            "SE-RX"
        } else {
            self.preset.as_str()
        };
        format!("{family} {}", self.mode.label())
    }

    /// Two-class model spec for this run with the crop as input size.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut spec = ModelSpec::preset(&self.preset, 2)?;
        spec.input_size = self.augment.crop;
        spec.validate()?;
        Ok(spec)
    }

    /// Checks everything that does not touch the file system.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.model_spec()?;
        match (self.mode, &self.weights) {
            (TrainMode::Finetune, None) => {
                return Err(Error::Config("finetune mode requires `weights`".into()));
            }
            (TrainMode::Scratch, Some(w)) => {
                return Err(Error::Config(format!(
                    "scratch mode forbids `weights` (got {})",
                    w.display()
                )));
            }
            _ => {}
        }
        if !matches!(self.evaluate.crops, 1 | 9) {
            return Err(Error::Config(format!("evaluate.crops must be 1 or 9, got {}", self.evaluate.crops)));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        Ok(())
    }

    /// Absolute paths, derived label filled in.
    pub fn resolved(&self) -> Result<Self> {
        let abs = |p: &Path| -> Result<PathBuf> {
            std::path::absolute(p).map_err(|e| Error::io(p, e))
        };
        let mut r = self.clone();
        r.manifest = abs(&self.manifest)?;
        r.out = abs(&self.out)?;
        r.weights = self.weights.as_deref().map(abs).transpose()?;
        r.label = Some(self.variant());
        Ok(r)
    }

    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
