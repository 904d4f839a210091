//! Run configuration for the training and evaluation commands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::TrainSettings;
use crate::error::{Error, Result};
use crate::nn::ModelConfig;

fn default_window() -> usize {
    12
}
fn default_patch() -> usize {
    3
}
fn default_conv_channels() -> [usize; 3] {
    [16, 32, 32]
}
fn default_embed_dim() -> usize {
    64
}
fn default_depth() -> usize {
    2
}
fn default_mlp_ratio() -> usize {
    2
}
fn default_alpha() -> f64 {
    0.7
}
fn default_epochs() -> usize {
    200
}
fn default_batch_size() -> usize {
    32
}
fn default_looks() -> u32 {
    4
}
fn default_lr() -> f64 {
    1e-3
}
fn default_train_per_class() -> usize {
    100
}
fn default_val_per_class() -> usize {
    25
}
fn default_stride() -> usize {
    1
}
fn default_sdsr() -> bool {
    true
}

/// One JSON file drives every command; CLI flags override individual
/// fields. Unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Generated scene: a directory containing `manifest.json`, or the
    /// manifest path itself.
    pub scene: PathBuf,
    /// Additional scenes for the ablation ladder (defaults to `scene`).
    #[serde(default)]
    pub ablate_scenes: Vec<PathBuf>,
    /// Teacher checkpoints consumed by student training; default to
    /// `<out>/teacher_band{1,2}.skd`.
    #[serde(default)]
    pub teacher1: Option<PathBuf>,
    #[serde(default)]
    pub teacher2: Option<PathBuf>,

    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_conv_channels")]
    pub conv_channels: [usize; 3],
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,

    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_looks")]
    pub looks: u32,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_sdsr")]
    pub sdsr: bool,

    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "default_val_per_class")]
    pub val_per_class: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,

    #[serde(default)]
    pub seed: u64,
    /// Worker threads for data generation and batched inference
    /// (0 = all available cores).
    #[serde(default)]
    pub threads: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.window % self.patch != 0 {
            return Err(Error::config(format!(
                "window {} must be a positive multiple of patch {}",
                self.window, self.patch
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride must be >= 1"));
        }
        if self.looks < 3 {
            return Err(Error::config(
                "looks must be >= 3 so rectification draws full-rank matrices",
            ));
        }
        if self.train_per_class == 0 {
            return Err(Error::config("train_per_class must be >= 1"));
        }
        Ok(())
    }

    /// Resolves the scene argument to its manifest file.
    pub fn manifest_path(scene: &Path) -> PathBuf {
        if scene.is_dir() {
            scene.join(crate::formats::MANIFEST_FILE)
        } else {
            scene.to_path_buf()
        }
    }

    pub fn model_config(&self, in_channels: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            in_channels,
            window: self.window,
            patch: self.patch,
            conv_channels: self.conv_channels,
            embed_dim: self.embed_dim,
            depth: self.depth,
            mlp_ratio: self.mlp_ratio,
            num_classes,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            alpha: self.alpha,
            looks: self.looks,
            sdsr: self.sdsr,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in_and_unknown_keys_fail() {
        let config: RunConfig = serde_json::from_str(r#"{"scene": "s"}"#).unwrap();
        assert_eq!(config.window, 12);
        assert_eq!(config.alpha, 0.7);
        assert_eq!(config.epochs, 200);
        assert!(config.sdsr);
        config.validate().unwrap();

        let bad = serde_json::from_str::<RunConfig>(r#"{"scene": "s", "nope": 1}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn validation_rejects_incompatible_window_patch() {
        let mut config: RunConfig = serde_json::from_str(r#"{"scene": "s"}"#).unwrap();
        config.window = 10;
        config.patch = 3;
        assert!(config.validate().is_err());
    }
}
