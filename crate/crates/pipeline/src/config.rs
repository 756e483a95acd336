//! Flat `key = value` run configuration.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ucad_core::backbone::BackboneConfig;
use ucad_core::tuning::TrainConfig;

use crate::error::{PipelineError, Result};
use crate::synthetic::{SyntheticTaskSpec, TextureFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMode {
    Synthetic,
    PixelImages,
    FeatureFiles,
}

impl DataMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Synthetic => "synthetic",
            Self::PixelImages => "pixel-images",
            Self::FeatureFiles => "feature-files",
        }
    }

    /// Whether visual prompts are optimized in this mode.
    pub fn tunes_visual_prompts(self) -> bool {
        !matches!(self, Self::FeatureFiles)
    }
}

impl fmt::Display for DataMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DataMode {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "pixel-images" => Ok(Self::PixelImages),
            "feature-files" => Ok(Self::FeatureFiles),
            _ => Err(PipelineError::Config(format!("unknown mode `{s}`"))),
        }
    }
}

/// Synthetic-stream settings shared by every task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSettings {
    pub defect_area: f64,
    pub train_images: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    pub region_levels: u16,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        Self { defect_area: 0.05, train_images: 20, test_normal: 10, test_anomalous: 10, region_levels: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: DataMode,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub tasks: Vec<String>,
    pub alpha: f64,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let backbone = BackboneConfig { input_hw: 64, patch_size: 8, ..BackboneConfig::default() };
        Self {
            seed: 42,
            mode: DataMode::Synthetic,
            data_dir: None,
            out_dir: PathBuf::from("ucad-out"),
            tasks: TextureFamily::ALL.iter().map(|f| f.name().to_string()).collect(),
            alpha: ucad_core::fusion::DEFAULT_ALPHA,
            backbone,
            train: TrainConfig::default(),
            synthetic: SyntheticSettings::default(),
        }
    }
}

fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| PipelineError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(PipelineError::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

impl RunConfig {
    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let b = &mut self.backbone;
        let t = &mut self.train;
        let s = &mut self.synthetic;
        match key {
            "seed" => {
                self.seed = num(key, value)?;
                t.seed = self.seed;
            }
            "mode" => self.mode = value.parse()?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out" | "out_dir" => self.out_dir = PathBuf::from(value),
            "tasks" => self.tasks = value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            "alpha" => {
                self.alpha = num(key, value)?;
                t.alpha_fusion = self.alpha;
            }
            "epochs" => t.epochs = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "momentum" => t.momentum = num(key, value)?,
            "sigma" => t.sigma = num(key, value)?,
            "lambda_alpha" => t.lambda_alpha = num(key, value)?,
            "lambda_beta" => t.lambda_beta = num(key, value)?,
            "k_sigmoid" => t.k_sigmoid = num(key, value)?,
            "delta_set" => {
                t.delta_set = value.split(',').map(|d| num(key, d.trim())).collect::<Result<_>>()?;
            }
            "key_budget" => t.key_budget = num(key, value)?,
            "bank_budget" => t.bank_budget = num(key, value)?,
            "validation_fraction" => t.validation_fraction = num(key, value)?,
            "max_pairs" => t.max_pairs = num(key, value)?,
            "n_layers" => b.n_layers = num(key, value)?,
            "dim" => b.dim = num(key, value)?,
            "heads" => b.heads = num(key, value)?,
            "patch_size" => b.patch_size = num(key, value)?,
            "image_hw" => b.input_hw = num(key, value)?,
            "channels" => b.image_channels = num(key, value)?,
            "tap_key_layer" => b.tap_layer_key = num(key, value)?,
            "tap_score_layer" => b.tap_layer_score = num(key, value)?,
            "dropout" => b.dropout_p = num(key, value)?,
            "mlp_ratio" => b.mlp_ratio = num(key, value)?,
            "text_dim" => b.text_dim = num(key, value)?,
            "text_layers" => b.text_layers = num(key, value)?,
            "text_heads" => b.text_heads = num(key, value)?,
            "positional" => b.positional = flag(key, value)?,
            "backbone_seed" => b.seed = num(key, value)?,
            "defect_area" => s.defect_area = num(key, value)?,
            "train_images" => s.train_images = num(key, value)?,
            "test_normal" => s.test_normal = num(key, value)?,
            "test_anomalous" => s.test_anomalous = num(key, value)?,
            "region_levels" => s.region_levels = num(key, value)?,
            _ => return Err(PipelineError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: ucad_core::Error| PipelineError::Config(e.to_string());
        self.backbone.validate().map_err(cfg_err)?;
        self.train.validate().map_err(cfg_err)?;
        if (self.alpha - self.train.alpha_fusion).abs() > 0.0 {
            return Err(PipelineError::Config("alpha and train alpha disagree".into()));
        }
        if self.tasks.is_empty() {
            return Err(PipelineError::Config("no tasks configured".into()));
        }
        let mut seen = HashSet::new();
        for t in &self.tasks {
            if !seen.insert(t) {
                return Err(PipelineError::Config(format!("task `{t}` listed twice")));
            }
        }
        match self.mode {
            DataMode::Synthetic => {
                for t in &self.tasks {
                    t.parse::<TextureFamily>()?;
                }
                for t in &self.tasks {
                    self.synthetic_spec(t)?.validate()?;
                }
            }
            DataMode::PixelImages | DataMode::FeatureFiles => {
                let dir = self
                    .data_dir
                    .as_ref()
                    .ok_or_else(|| PipelineError::Config(format!("mode {} needs data_dir", self.mode)))?;
                if !dir.is_dir() {
                    return Err(PipelineError::Config(format!("data_dir {} does not exist", dir.display())));
                }
            }
        }
        Ok(())
    }

    pub fn synthetic_spec(&self, task: &str) -> Result<SyntheticTaskSpec> {
        let s = &self.synthetic;
        Ok(SyntheticTaskSpec {
            defect_area: s.defect_area,
            train_images: s.train_images,
            test_normal: s.test_normal,
            test_anomalous: s.test_anomalous,
            region_levels: s.region_levels,
            image_hw: self.backbone.input_hw,
            channels: self.backbone.image_channels,
            grid_side: self.backbone.grid_side(),
            ..SyntheticTaskSpec::new(task.parse()?)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.learning_rate, 5e-5);
        assert_eq!(c.alpha, 0.9);
        assert_eq!(c.tasks.len(), 5);
        c.validate().unwrap();
    }

    #[test]
    fn parse_and_override() {
        let c = RunConfig::parse("# run\nseed = 7\nalpha=0.5\ntasks = rings, dots\ndelta_set = 0, 1,-1\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.train.alpha_fusion, 0.5);
        assert_eq!(c.tasks, vec!["rings", "dots"]);
        assert_eq!(c.train.delta_set, vec![0.0, 1.0, -1.0]);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        assert_eq!(RunConfig::parse("nonsense").unwrap_err().exit_code(), 2);
        assert_eq!(RunConfig::parse("wat = 1").unwrap_err().exit_code(), 2);
        assert!(RunConfig::parse("tasks = rings, rings").unwrap().validate().is_err());
        assert!(RunConfig::parse("tasks = marble").unwrap().validate().is_err());
        assert!(RunConfig::parse("tap_score_layer = 9").unwrap().validate().is_err());
    }
}
