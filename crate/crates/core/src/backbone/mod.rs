//! Pluggable patch classifiers: specification, training, persistence and a
//! closed-form oracle for the synthetic corpus.

mod jitter;
mod model;
pub mod net;
pub mod nn;
mod oracle;
mod task;
mod train;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalespace::NETWORK_INPUT_SIDE;

pub use jitter::{apply_jitter, color_jitter, ColorJitterParams, JitterFactors};
pub use model::{TrainedModel, TrainingFingerprint, MODEL_SPEC_FILE, MODEL_WEIGHTS_FILE, TRAIN_LOG_FILE};
pub use net::Architecture;
pub use oracle::{mock_oracle_backbone, CueOracle, OracleTask};
pub use task::Task;
pub use train::{data_hash, lr_at, train, train_with, EpochLog, LabeledImage, Sgd, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputPolicy {
    /// Inputs are exactly 224×224.
    Fixed224,
    /// Inputs keep their native resolution; any side at or above the model
    /// minimum is accepted.
    VariableFullRes,
}

impl std::fmt::Display for InputPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InputPolicy::Fixed224 => "fixed_224",
            InputPolicy::VariableFullRes => "variable_full_res",
        })
    }
}

/// Model family behind a classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BackboneKind {
    Trainable { arch: Architecture },
    CueOracle { task: OracleTask },
}

impl BackboneKind {
    pub fn min_side(&self) -> u32 {
        match self {
            BackboneKind::Trainable { arch } => arch.min_side(),
            BackboneKind::CueOracle { .. } => oracle::MIN_SIDE,
        }
    }

    /// Every family ends in a global spatial mean (or a size-normalized
    /// statistic), so every family is size-erasing.
    pub fn is_size_erasing(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub n_classes: usize,
    pub input_policy: InputPolicy,
    /// Pretrained initialization is not available; must be false.
    pub pretrained: bool,
    pub task_tag: String,
    pub class_names: Vec<String>,
    pub backbone: BackboneKind,
}

impl ClassifierSpec {
    /// Spec for a trainable model of `task`.
    pub fn for_task(task: Task, input_policy: InputPolicy, arch: Architecture) -> Self {
        ClassifierSpec {
            n_classes: task.n_classes(),
            input_policy,
            pretrained: false,
            task_tag: task.tag().to_string(),
            class_names: task.class_names().iter().map(|s| s.to_string()).collect(),
            backbone: BackboneKind::Trainable { arch },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.class_names.len() != self.n_classes {
            return Err(Error::invalid(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.n_classes
            )));
        }
        if self.pretrained {
            return Err(Error::invalid("pretrained initialization is not available"));
        }
        if self.input_policy == InputPolicy::VariableFullRes && !self.backbone.is_size_erasing() {
            return Err(Error::invalid(
                "variable_full_res requires a size-erasing pooling stage",
            ));
        }
        Ok(())
    }

    /// Index of the class called `name`.
    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::invalid(format!("model `{}` has no class `{name}`", self.task_tag)))
    }

    /// Checks an input image against the input policy.
    pub fn check_input(&self, img: &RgbImage) -> Result<()> {
        let (w, h) = img.dimensions();
        match self.input_policy {
            InputPolicy::Fixed224 if (w, h) != (NETWORK_INPUT_SIDE, NETWORK_INPUT_SIDE) => Err(Error::invalid(
                format!("fixed_224 model `{}` got a {w}x{h} input", self.task_tag),
            )),
            InputPolicy::VariableFullRes if w.min(h) < self.backbone.min_side() => Err(Error::invalid(format!(
                "model `{}` needs inputs of at least {} px, got {w}x{h}",
                self.task_tag,
                self.backbone.min_side()
            ))),
            _ => Ok(()),
        }
    }
}

/// Anything that maps an image to a class probability vector.
pub trait Classifier: Sync {
    fn spec(&self) -> &ClassifierSpec;

    /// Normalized class probabilities, in `spec().class_names` order.
    fn predict_proba(&self, img: &RgbImage) -> Result<Vec<f64>>;
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}
