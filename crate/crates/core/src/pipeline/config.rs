use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{FcnSegmenterSpec, InitScheme, ModelSpec, ResNet15Spec, SequentialCnnSpec};
use crate::tensor::DEFAULT_LEARNING_RATE;
use crate::transforms::ChannelPlan;

fn default_lr() -> f64 {
    DEFAULT_LEARNING_RATE
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    100
}
fn default_input_size() -> usize {
    64
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_background_weight() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierArch {
    #[default]
    Sequential,
    Resnet15,
}

/// Hyperparameters shared by classifier and segmenter training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub init: InitScheme,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Classifier crop side.
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "ChannelPlan::rgbn")]
    pub plan: ChannelPlan,
    /// Stop after this many epochs without a better validation metric.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Share of a crop dataset held out for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub arch: ClassifierArch,
    /// Overrides the classifier's conv widths.
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    /// Overrides the segmenter's encoder and decoder widths.
    #[serde(default)]
    pub encoder: Option<Vec<usize>>,
    #[serde(default)]
    pub decoder: Option<Vec<usize>>,
    /// Loss weight of background pixels in segmentation.
    #[serde(default = "default_background_weight")]
    pub background_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            init: InitScheme::FanIn,
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: 0,
            input_size: default_input_size(),
            plan: ChannelPlan::rgbn(),
            patience: None,
            val_fraction: default_val_fraction(),
            arch: ClassifierArch::Sequential,
            widths: None,
            encoder: None,
            decoder: None,
            background_weight: default_background_weight(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.input_size == 0 {
            return bad("batch_size, epochs and input_size must be positive");
        }
        if self.patience == Some(0) {
            return bad("patience must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if !(self.background_weight > 0.0) {
            return bad("background_weight must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn classifier_spec(&self, num_classes: usize) -> ModelSpec {
        let c = self.plan.channels();
        match self.arch {
            ClassifierArch::Sequential => {
                let mut s = SequentialCnnSpec::new(c, num_classes, self.input_size);
                if let Some(w) = &self.widths {
                    s.widths = w.clone();
                }
                ModelSpec::Sequential(s)
            }
            ClassifierArch::Resnet15 => {
                let mut s = ResNet15Spec::new(c, num_classes, self.input_size);
                if let Some(w) = &self.widths {
                    s.widths = w.clone();
                }
                ModelSpec::Resnet15(s)
            }
        }
    }

    pub fn segmenter_spec(&self, num_classes: usize, height: usize, width: usize) -> ModelSpec {
        let mut s = FcnSegmenterSpec::new(self.plan.channels(), num_classes, height, width);
        if let Some(e) = &self.encoder {
            s.encoder = e.clone();
        }
        if let Some(d) = &self.decoder {
            s.decoder = d.clone();
        }
        ModelSpec::Fcn(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    SingleStage,
    TwoStage,
}

fn default_min_area() -> usize {
    30
}
fn default_threshold() -> f64 {
    0.5
}

/// Which trained models make up a detector and how their outputs combine.
/// Relative archive paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: PipelineMode,
    pub segmenter: PathBuf,
    #[serde(default)]
    pub classifier: Option<PathBuf>,
    /// Components smaller than this many pixels are dropped.
    #[serde(default = "default_min_area")]
    pub min_component_area: usize,
    /// Leaf-probability cut for two-stage components.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Black out crop pixels outside the component before classifying.
    #[serde(default)]
    pub mask_fill: bool,
}

impl PipelineConfig {
    pub fn single_stage(segmenter: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            mode: PipelineMode::SingleStage,
            segmenter: segmenter.into(),
            classifier: None,
            min_component_area: default_min_area(),
            threshold: default_threshold(),
            mask_fill: false,
        }
    }

    pub fn two_stage(segmenter: impl Into<PathBuf>, classifier: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            mode: PipelineMode::TwoStage,
            classifier: Some(classifier.into()),
            ..Self::single_stage(segmenter)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, &self.classifier) {
            (PipelineMode::TwoStage, None) => {
                return Err(Error::Config("two_stage needs a classifier archive".into()))
            }
            (PipelineMode::SingleStage, Some(_)) => {
                return Err(Error::Config("single_stage takes only a segmenter archive".into()))
            }
            _ => {}
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} not in (0, 1)", self.threshold)));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.segmenter = base.join(&cfg.segmenter);
        cfg.classifier = cfg.classifier.map(|c| base.join(c));
        Ok(cfg)
    }
}
