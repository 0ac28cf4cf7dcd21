//! Run configuration: TOML text, fully serialized back into every run
//! directory so a run can be reproduced from its snapshot alone.

use crate::dataset::LabelField;
use crate::error::{Error, Result};
use crate::hypernet::Activation;
use crate::train::{DescriptorMode, ScheduleChoice, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    pub run: RunSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default, rename = "task")]
    pub tasks: Vec<TaskSection>,
    #[serde(default)]
    pub downstream: DownstreamSection,
    #[serde(default)]
    pub measure: MeasureSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub bound: BoundSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceChoice {
    /// Procedural glyph corpus; runs with no external files.
    Glyph,
    /// MNIST/KMNIST IDX files under the data directory.
    Idx,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunSection {
    pub seed: u64,
    #[serde(default = "defaults::source")]
    pub source: SourceChoice,
    /// Defaults to $HYPERINV_DATA_DIR, then "data".
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "defaults::pretrain_dataset")]
    pub pretrain_dataset: String,
    #[serde(default = "defaults::downstream_dataset")]
    pub downstream_dataset: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ScheduleSection {
    pub kind: String,
    #[serde(default = "defaults::every_epochs")]
    pub every_epochs: usize,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
}

impl ScheduleSection {
    pub fn choice(&self) -> Result<ScheduleChoice> {
        match self.kind.as_str() {
            "constant" => Ok(ScheduleChoice::Constant),
            "cosine" => Ok(ScheduleChoice::Cosine),
            "multi-step" => Ok(ScheduleChoice::MultiStepEvery {
                every_epochs: self.every_epochs,
                gamma: self.gamma,
            }),
            other => Err(Error::Config(format!(
                "unknown schedule kind '{other}' (expected constant, cosine, or multi-step)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainMode {
    Multitask,
    Contrastive,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct PretrainSection {
    #[serde(default = "defaults::mode")]
    pub mode: PretrainMode,
    #[serde(default = "defaults::pretrain_epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::pretrain_batch")]
    pub batch_size: usize,
    #[serde(default = "defaults::pretrain_lr")]
    pub lr: f64,
    #[serde(default = "defaults::cosine")]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "defaults::one")]
    pub aug_samples: usize,
    #[serde(default = "defaults::hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "defaults::activation")]
    pub activation: Activation,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Glyph images per class for the pre-training corpus.
    #[serde(default = "defaults::glyph_per_class")]
    pub glyph_per_class: usize,
    /// Train the shared-encoder baseline alongside.
    #[serde(default = "defaults::yes")]
    pub baseline: bool,
    #[serde(default = "defaults::projection_dim")]
    pub projection_dim: usize,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        toml::from_str("").expect("empty pretrain section")
    }
}

impl PretrainSection {
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            schedule: self.schedule.choice()?,
            weight_decay: self.weight_decay,
            seed,
            aug_samples: self.aug_samples,
            descriptor_mode: DescriptorMode::Sigmoid,
            grad_clip: self.grad_clip,
            levels: 2,
            temperature: self.temperature,
            hidden_dim: self.hidden_dim,
            activation: self.activation,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TaskSection {
    pub name: String,
    pub label: LabelField,
    pub descriptor: Vec<f64>,
    pub head_size: usize,
}

/// The three synthetic tasks with their observed descriptors.
pub fn default_tasks() -> Vec<TaskSection> {
    vec![
        TaskSection {
            name: "digit".into(),
            label: LabelField::Digit,
            descriptor: vec![1.0, 1.0],
            head_size: 10,
        },
        TaskSection {
            name: "color".into(),
            label: LabelField::Color,
            descriptor: vec![1.0, 0.0],
            head_size: 3,
        },
        TaskSection {
            name: "rotation".into(),
            label: LabelField::Rotation,
            descriptor: vec![0.0, 1.0],
            head_size: 7,
        },
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct DownstreamSection {
    #[serde(default = "defaults::tasks_digit_rotation")]
    pub tasks: Vec<LabelField>,
    #[serde(default = "defaults::n_list")]
    pub n_per_class: Vec<usize>,
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "defaults::downstream_epochs")]
    pub epochs: usize,
    /// 0 = full batch up to 512 examples, otherwise 128.
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default = "defaults::pretrain_lr")]
    pub lr: f64,
    #[serde(default = "defaults::multi_step")]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "defaults::descriptor_mode")]
    pub descriptor_mode: DescriptorMode,
    #[serde(default = "defaults::levels")]
    pub levels: usize,
    #[serde(default = "defaults::glyph_train_per_class")]
    pub glyph_train_per_class: usize,
    #[serde(default = "defaults::glyph_test_per_class")]
    pub glyph_test_per_class: usize,
}

impl Default for DownstreamSection {
    fn default() -> Self {
        toml::from_str("").expect("empty downstream section")
    }
}

impl DownstreamSection {
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            schedule: self.schedule.choice()?,
            weight_decay: self.weight_decay,
            seed,
            aug_samples: 1,
            descriptor_mode: self.descriptor_mode,
            grad_clip: None,
            levels: self.levels,
            temperature: 0.5,
            hidden_dim: 40,
            activation: Activation::Relu,
        })
    }

    pub fn head_size(&self, field: LabelField) -> usize {
        field.class_count()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct MeasureSection {
    #[serde(default = "defaults::sweep_steps")]
    pub sweep_steps: usize,
    #[serde(default = "defaults::n_aug")]
    pub n_aug: usize,
    #[serde(default = "defaults::measure_images")]
    pub images: usize,
}

impl Default for MeasureSection {
    fn default() -> Self {
        toml::from_str("").expect("empty measure section")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct SweepSection {
    /// Pinned descriptors, one train-a-fresh-head point each.
    #[serde(default = "defaults::sweep_descriptors")]
    pub descriptors: Vec<Vec<f64>>,
    #[serde(default = "defaults::tasks_digit_color")]
    pub tasks: Vec<LabelField>,
    #[serde(default = "defaults::sweep_n_per_class")]
    pub n_per_class: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        toml::from_str("").expect("empty sweep section")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct BoundSection {
    #[serde(default = "defaults::trials")]
    pub trials: usize,
    #[serde(default = "defaults::delta")]
    pub delta: f64,
    #[serde(default = "defaults::bound_n_per_class")]
    pub n_per_class: usize,
    #[serde(default = "defaults::tasks_digit")]
    pub task: LabelField,
}

impl Default for BoundSection {
    fn default() -> Self {
        toml::from_str("").expect("empty bound section")
    }
}

mod defaults {
    use super::*;

    pub fn source() -> SourceChoice {
        SourceChoice::Glyph
    }
    pub fn pretrain_dataset() -> String {
        "mnist".into()
    }
    pub fn downstream_dataset() -> String {
        "kmnist".into()
    }
    pub fn mode() -> PretrainMode {
        PretrainMode::Multitask
    }
    pub fn pretrain_epochs() -> usize {
        200
    }
    pub fn pretrain_batch() -> usize {
        128
    }
    pub fn pretrain_lr() -> f64 {
        5e-4
    }
    pub fn cosine() -> ScheduleSection {
        ScheduleSection {
            kind: "cosine".into(),
            every_epochs: every_epochs(),
            gamma: gamma(),
        }
    }
    pub fn multi_step() -> ScheduleSection {
        ScheduleSection {
            kind: "multi-step".into(),
            every_epochs: every_epochs(),
            gamma: gamma(),
        }
    }
    pub fn every_epochs() -> usize {
        10
    }
    pub fn gamma() -> f64 {
        0.1
    }
    pub fn one() -> usize {
        1
    }
    pub fn yes() -> bool {
        true
    }
    pub fn hidden_dim() -> usize {
        40
    }
    pub fn activation() -> Activation {
        Activation::Relu
    }
    pub fn glyph_per_class() -> usize {
        300
    }
    pub fn projection_dim() -> usize {
        64
    }
    pub fn temperature() -> f64 {
        0.5
    }
    pub fn tasks_digit_rotation() -> Vec<LabelField> {
        vec![LabelField::Digit, LabelField::Rotation]
    }
    pub fn tasks_digit_color() -> Vec<LabelField> {
        vec![LabelField::Digit, LabelField::Color]
    }
    pub fn tasks_digit() -> LabelField {
        LabelField::Digit
    }
    pub fn n_list() -> Vec<usize> {
        vec![10, 20, 50, 100, 200]
    }
    pub fn seeds() -> Vec<u64> {
        vec![0, 1, 2, 3, 4]
    }
    pub fn downstream_epochs() -> usize {
        100
    }
    pub fn descriptor_mode() -> DescriptorMode {
        DescriptorMode::Sigmoid
    }
    pub fn levels() -> usize {
        2
    }
    pub fn glyph_train_per_class() -> usize {
        400
    }
    pub fn glyph_test_per_class() -> usize {
        100
    }
    pub fn sweep_steps() -> usize {
        11
    }
    pub fn n_aug() -> usize {
        8
    }
    pub fn measure_images() -> usize {
        64
    }
    pub fn sweep_descriptors() -> Vec<Vec<f64>> {
        vec![vec![1.0, 1.0], vec![1.0, 0.0]]
    }
    pub fn sweep_n_per_class() -> usize {
        50
    }
    pub fn trials() -> usize {
        20
    }
    pub fn delta() -> f64 {
        0.05
    }
    pub fn bound_n_per_class() -> usize {
        10
    }
}

impl RunConfig {
    /// Parse a TOML config; errors carry line/column and field path.
    pub fn from_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Resolved data directory: config value, else $HYPERINV_DATA_DIR,
    /// else "data".
    pub fn data_dir(&self) -> PathBuf {
        if let Some(d) = &self.run.data_dir {
            return d.clone();
        }
        if let Ok(d) = std::env::var("HYPERINV_DATA_DIR") {
            return PathBuf::from(d);
        }
        PathBuf::from("data")
    }

    pub fn tasks_or_default(&self) -> Vec<TaskSection> {
        if self.tasks.is_empty() {
            default_tasks()
        } else {
            self.tasks.clone()
        }
    }
}
