use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{AlignConfig, AlignMode, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::model::{Objective, Variant};
use crate::transformer::TransformerDims;
use crate::vanilla::VanillaDims;

/// Alignment setting as written in a config; `none` trains without the term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignSetting {
    None,
    Dot,
    Rank,
}

impl AlignSetting {
    pub fn mode(self) -> Option<AlignMode> {
        match self {
            AlignSetting::None => None,
            AlignSetting::Dot => Some(AlignMode::Dot),
            AlignSetting::Rank => Some(AlignMode::Rank),
        }
    }
}

fn default_variant() -> Variant {
    Variant::Vanilla
}
fn default_align() -> AlignSetting {
    AlignSetting::Dot
}
fn default_lambda() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_lr() -> f64 {
    2e-3
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    20
}
fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_align")]
    pub align_mode: AlignSetting,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    pub train_path: PathBuf,
    pub val_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<PathBuf>,
    /// Evaluate every this many epochs; the final epoch is always evaluated.
    #[serde(default = "default_one")]
    pub eval_every: usize,
    /// Where the per-epoch CSV goes; standard output when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_path: Option<PathBuf>,
    /// Transformer layers entering the alignment term.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_mask: Option<Vec<bool>>,
    #[serde(default)]
    pub vanilla: VanillaDims,
    #[serde(default)]
    pub transformer: TransformerDims,
}

impl TrainConfig {
    /// Defaults for everything but the dataset paths.
    pub fn new(train_path: impl Into<PathBuf>, val_path: impl Into<PathBuf>) -> Self {
        TrainConfig {
            variant: default_variant(),
            align_mode: default_align(),
            lambda: default_lambda(),
            alpha: default_alpha(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: 0,
            train_path: train_path.into(),
            val_path: val_path.into(),
            checkpoint_path: None,
            eval_every: 1,
            report_path: None,
            layer_mask: None,
            vanilla: VanillaDims::default(),
            transformer: TransformerDims::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return cfg(format!("lambda must be a nonnegative number, got {}", self.lambda));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return cfg(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return cfg(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return cfg("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return cfg("epochs must be at least 1".into());
        }
        if self.eval_every == 0 {
            return cfg("eval_every must be at least 1".into());
        }
        match self.variant {
            Variant::Vanilla => self.vanilla.validate()?,
            Variant::Transformer => {
                self.transformer.validate()?;
                if let Some(mask) = &self.layer_mask {
                    if mask.len() != self.transformer.layers {
                        return cfg(format!(
                            "layer_mask has {} entries for {} layers",
                            mask.len(),
                            self.transformer.layers
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Lambda actually applied: zero when alignment is off.
    pub fn effective_lambda(&self) -> f64 {
        if self.align_mode == AlignSetting::None {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn objective(&self) -> Objective {
        let align = self.align_mode.mode().map(|mode| AlignConfig { mode, alpha: self.alpha, lambda: self.lambda });
        let layer_mask = match self.variant {
            Variant::Transformer => self.layer_mask.clone(),
            Variant::Vanilla => None,
        };
        Objective { align, layer_mask }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset, checkpoint and report paths
    /// resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            fix(&mut cfg.train_path);
            fix(&mut cfg.val_path);
            for p in [&mut cfg.checkpoint_path, &mut cfg.report_path].into_iter().flatten() {
                fix(p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
