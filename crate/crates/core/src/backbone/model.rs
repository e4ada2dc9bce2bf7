//! Trained models and their on-disk directory format:
//!
//! ```text
//! <dir>/spec.json       classifier spec + training fingerprint
//! <dir>/weights.bin     opaque parameter blob
//! <dir>/train_log.json  per-epoch learning rate, loss and accuracy
//! ```

use std::path::Path;

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{Network, Tensor};
use super::nn::softmax;
use super::oracle::CueOracle;
use super::train::{EpochLog, TrainConfig};
use super::{BackboneKind, Classifier, ClassifierSpec};
use crate::error::{Error, Result};

pub const MODEL_SPEC_FILE: &str = "spec.json";
pub const MODEL_WEIGHTS_FILE: &str = "weights.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.json";

const FORMAT_VERSION: u32 = 1;
const WEIGHTS_MAGIC: &[u8; 4] = b"PLYW";

/// What a model was trained with; `config` is absent for oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingFingerprint {
    pub config: Option<TrainConfig>,
    pub data_hash: String,
}

// One value per loaded model; boxing the network would buy nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Weights {
    Network(Network),
    Oracle(CueOracle),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    spec: ClassifierSpec,
    weights: Weights,
    fingerprint: TrainingFingerprint,
    log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct SpecFile {
    format_version: u32,
    classifier: ClassifierSpec,
    training: TrainingFingerprint,
}

impl TrainedModel {
    pub(crate) fn new(
        spec: ClassifierSpec,
        weights: Weights,
        fingerprint: TrainingFingerprint,
        log: Vec<EpochLog>,
    ) -> Self {
        TrainedModel {
            spec,
            weights,
            fingerprint,
            log,
        }
    }

    pub fn fingerprint(&self) -> &TrainingFingerprint {
        &self.fingerprint
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    /// Serialized parameters.
    pub fn weights_blob(&self) -> Vec<u8> {
        match &self.weights {
            Weights::Network(net) => {
                let flat = net.to_flat();
                let mut out = Vec::with_capacity(16 + 4 * flat.len());
                out.extend_from_slice(WEIGHTS_MAGIC);
                out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
                out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
                for v in flat {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out
            }
            Weights::Oracle(o) => serde_json::to_vec_pretty(o).expect("oracle parameters serialize"),
        }
    }

    fn weights_from_blob(spec: &ClassifierSpec, blob: &[u8], path: &Path) -> Result<Weights> {
        match &spec.backbone {
            BackboneKind::Trainable { arch } => {
                let bad = |m: &str| Error::parse(path, m.to_string());
                if blob.len() < 16 || &blob[..4] != WEIGHTS_MAGIC {
                    return Err(bad("not a weights file"));
                }
                let version = u32::from_le_bytes(blob[4..8].try_into().expect("4 bytes"));
                if version != FORMAT_VERSION {
                    return Err(bad(&format!("unsupported weights version {version}")));
                }
                let n = u64::from_le_bytes(blob[8..16].try_into().expect("8 bytes")) as usize;
                if blob.len() != 16 + 4 * n {
                    return Err(bad("truncated weights file"));
                }
                let flat: Vec<f32> = blob[16..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                let mut net = Network::init(arch, spec.n_classes, &mut ChaCha8Rng::seed_from_u64(0));
                net.load_flat(&flat).map_err(|e| bad(&e))?;
                Ok(Weights::Network(net))
            }
            BackboneKind::CueOracle { task } => {
                let oracle: CueOracle = serde_json::from_slice(blob).map_err(|e| Error::parse(path, e.to_string()))?;
                if oracle.task != *task {
                    return Err(Error::parse(path, "oracle task does not match spec.json"));
                }
                Ok(Weights::Oracle(oracle))
            }
        }
    }

    /// Writes the model directory, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let spec = SpecFile {
            format_version: FORMAT_VERSION,
            classifier: self.spec.clone(),
            training: self.fingerprint.clone(),
        };
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        write(MODEL_SPEC_FILE, &serde_json::to_vec_pretty(&spec)?)?;
        write(MODEL_WEIGHTS_FILE, &self.weights_blob())?;
        write(TRAIN_LOG_FILE, &serde_json::to_vec_pretty(&self.log)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read(&p).map_err(|e| Error::io(p, e))
        };
        let spec_path = dir.join(MODEL_SPEC_FILE);
        let spec: SpecFile =
            serde_json::from_slice(&read(MODEL_SPEC_FILE)?).map_err(|e| Error::parse(&spec_path, e.to_string()))?;
        if spec.format_version != FORMAT_VERSION {
            return Err(Error::parse(
                &spec_path,
                format!("unsupported model format {}", spec.format_version),
            ));
        }
        spec.classifier.validate()?;
        let weights = Self::weights_from_blob(
            &spec.classifier,
            &read(MODEL_WEIGHTS_FILE)?,
            &dir.join(MODEL_WEIGHTS_FILE),
        )?;
        let log = match read(TRAIN_LOG_FILE) {
            Ok(bytes) => {
                serde_json::from_slice(&bytes).map_err(|e| Error::parse(dir.join(TRAIN_LOG_FILE), e.to_string()))?
            }
            Err(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        Ok(TrainedModel {
            spec: spec.classifier,
            weights,
            fingerprint: spec.training,
            log,
        })
    }
}

impl Classifier for TrainedModel {
    fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    fn predict_proba(&self, img: &RgbImage) -> Result<Vec<f64>> {
        self.spec.check_input(img)?;
        Ok(match &self.weights {
            Weights::Network(net) => softmax(&net.logits(&Tensor::from_image(img))),
            Weights::Oracle(o) => o.probs(img),
        })
    }
}
