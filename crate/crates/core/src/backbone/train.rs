//! Minibatch SGD with a step learning-rate schedule.

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::jitter::{color_jitter, ColorJitterParams};
use super::model::{TrainedModel, TrainingFingerprint, Weights};
use super::net::{Network, Tensor};
use super::{argmax, BackboneKind, ClassifierSpec};
use crate::config::{parse_value, KvConfig};
use crate::dataset::synth::stream_seed;
use crate::error::{Error, Result};

/// Stream tags that keep the per-purpose RNG streams independent.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_JITTER: u64 = 3;

/// Plain stochastic gradient descent, optionally with momentum and L2
/// weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd {
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub optimizer: Sgd,
    pub jitter: ColorJitterParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr0: 0.01,
            lr_decay_factor: 0.1,
            lr_decay_every: 20,
            batch_size: 16,
            optimizer: Sgd::default(),
            jitter: ColorJitterParams::default(),
            seed: 0,
        }
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr0" => self.lr0 = parse_value(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_value(key, value)?,
            "lr_decay_every" => self.lr_decay_every = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "momentum" => self.optimizer.momentum = parse_value(key, value)?,
            "weight_decay" => self.optimizer.weight_decay = parse_value(key, value)?,
            "jitter_brightness" => self.jitter.brightness = parse_value(key, value)?,
            "jitter_contrast" => self.jitter.contrast = parse_value(key, value)?,
            "jitter_saturation" => self.jitter.saturation = parse_value(key, value)?,
            "jitter_hue" => self.jitter.hue = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(format!("unknown training key `{key}`")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("lr0", self.lr0.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("momentum", self.optimizer.momentum.to_string()),
            ("weight_decay", self.optimizer.weight_decay.to_string()),
            ("jitter_brightness", self.jitter.brightness.to_string()),
            ("jitter_contrast", self.jitter.contrast.to_string()),
            ("jitter_saturation", self.jitter.saturation.to_string()),
            ("jitter_hue", self.jitter.hue.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.epochs == 0 {
            return Err("epochs must be at least 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(format!(
                "lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            ));
        }
        if self.lr_decay_every == 0 {
            return Err("lr_decay_every must be at least 1".into());
        }
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(format!("momentum must lie in [0, 1), got {}", self.optimizer.momentum));
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            return Err(format!(
                "weight_decay must be non-negative, got {}",
                self.optimizer.weight_decay
            ));
        }
        self.jitter.validate()
    }
}

/// Learning rate of epoch `epoch` (0-based): `lr0 · factor^floor(epoch / every)`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Accuracy on the (augmented) training samples, measured during the
    /// epoch before each minibatch update.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: RgbImage,
    pub class: usize,
}

/// SHA-256 over the class indices and pixel data of `samples`, in order.
pub fn data_hash(samples: &[LabeledImage]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update((s.class as u64).to_le_bytes());
        h.update(s.image.width().to_le_bytes());
        h.update(s.image.height().to_le_bytes());
        h.update(s.image.as_raw());
    }
    format!("{:x}", h.finalize())
}

pub fn train(samples: &[LabeledImage], spec: &ClassifierSpec, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_with(samples, spec, cfg, |_| {})
}

/// Trains a model, calling `on_epoch` after every epoch.
pub fn train_with(
    samples: &[LabeledImage],
    spec: &ClassifierSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainedModel> {
    cfg.validate().map_err(Error::InvalidArgument)?;
    spec.validate()?;
    let BackboneKind::Trainable { arch } = &spec.backbone else {
        return Err(Error::invalid("only trainable backbones can be trained"));
    };
    let mut support = vec![0usize; spec.n_classes];
    for s in samples {
        if s.class >= spec.n_classes {
            return Err(Error::invalid(format!(
                "class index {} out of range for {} classes",
                s.class, spec.n_classes
            )));
        }
        spec.check_input(&s.image)?;
        support[s.class] += 1;
    }
    if let Some(empty) = support.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(spec.class_names[empty].clone()));
    }

    let mut net = Network::init(
        arch,
        spec.n_classes,
        &mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &[STREAM_INIT])),
    );
    let mut velocity = net.zero_grads();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch) as f32;
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(
            cfg.seed,
            &[STREAM_SHUFFLE, epoch as u64],
        )));
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);

        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &[STREAM_JITTER, epoch as u64, i as u64]));
                    let img = color_jitter(&s.image, &cfg.jitter, &mut rng);
                    net.loss_and_grads(&Tensor::from_image(&img), s.class)
                })
                .collect();

            // Fixed-order reduction keeps training bit-reproducible.
            let mut grads = net.zero_grads();
            for ((loss, logits, g), &i) in results.iter().zip(batch) {
                loss_sum += loss;
                let probs: Vec<f64> = logits.iter().map(|&l| l as f64).collect();
                correct += (argmax(&probs) == samples[i].class) as usize;
                for (acc, part) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
                }
            }
            let scale = 1.0 / batch.len() as f32;
            let (momentum, decay) = (cfg.optimizer.momentum as f32, cfg.optimizer.weight_decay as f32);
            for ((param, grad), vel) in net.tensors_mut().into_iter().zip(&grads).zip(&mut velocity) {
                for ((w, g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                    *v = momentum * *v + g * scale + decay * *w;
                    *w -= lr * *v;
                }
            }
        }

        let entry = EpochLog {
            epoch,
            lr: lr_at(cfg, epoch),
            mean_loss: loss_sum / samples.len() as f64,
            train_accuracy: correct as f64 / samples.len() as f64,
        };
        on_epoch(&entry);
        log.push(entry);
    }

    Ok(TrainedModel::new(
        spec.clone(),
        Weights::Network(net),
        TrainingFingerprint {
            config: Some(cfg.clone()),
            data_hash: data_hash(samples),
        },
        log,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Architecture, Classifier, InputPolicy, Task};
    use crate::config::apply_kv;
    use image::Rgb;
    use rand::Rng;

    #[test]
    fn default_schedule_trace() {
        let cfg = TrainConfig::default();
        let trace: Vec<f64> = (0..cfg.epochs).map(|e| lr_at(&cfg, e)).collect();
        let mut expect = vec![0.01; 20];
        expect.extend([0.001; 20]);
        expect.extend([0.0001; 10]);
        for (a, b) in trace.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert_eq!(trace.len(), 50);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(apply_kv(&mut cfg, "epochs = 0\n").unwrap_err().contains("epochs"));
        let mut cfg = TrainConfig::default();
        assert!(apply_kv(&mut cfg, "lr_decay_factor = 1.5\n").is_err());
        let mut cfg = TrainConfig::default();
        apply_kv(&mut cfg, "epochs = 3\nmomentum = 0.9\njitter_hue = 0\n").unwrap();
        assert_eq!((cfg.epochs, cfg.optimizer.momentum, cfg.jitter.hue), (3, 0.9, 0.0));
        let mut again = TrainConfig::default();
        apply_kv(&mut again, &cfg.to_kv_string()).unwrap();
        assert_eq!(again, cfg);
    }

    /// Two classes whose mean colours differ: separable by the channel-mean
    /// features of the linear backbone.
    fn separable(n: usize, seed: u64) -> Vec<LabeledImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let class = i % 2;
                let base = if class == 0 { 60 } else { 190 };
                let image = RgbImage::from_fn(6, 6, |_, _| {
                    let v = (base + rng.random_range(-30i32..=30)) as u8;
                    Rgb([v, v, 255 - v])
                });
                LabeledImage { image, class }
            })
            .collect()
    }

    fn linear_spec() -> ClassifierSpec {
        let mut spec = ClassifierSpec::for_task(Task::Hp, InputPolicy::VariableFullRes, Architecture::Linear);
        spec.task_tag = "separable".into();
        spec
    }

    #[test]
    fn linear_backbone_separates_separable_data() {
        let data = separable(40, 1);
        let cfg = TrainConfig {
            jitter: ColorJitterParams::NONE,
            ..TrainConfig::default()
        };
        let model = train(&data, &linear_spec(), &cfg).unwrap();
        assert_eq!(model.log().len(), 50);
        assert_eq!(model.log().last().unwrap().train_accuracy, 1.0);
        for (e, entry) in model.log().iter().enumerate() {
            assert_eq!(entry.lr, lr_at(&cfg, e));
        }
        for s in &data {
            assert_eq!(argmax(&model.predict_proba(&s.image).unwrap()), s.class);
        }
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let data = separable(12, 2);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let spec = ClassifierSpec::for_task(
            Task::Hp,
            InputPolicy::VariableFullRes,
            Architecture::SmallResNet { widths: [4, 4] },
        );
        let data: Vec<_> = data
            .into_iter()
            .map(|s| LabeledImage {
                image: image::imageops::resize(&s.image, 16, 16, image::imageops::FilterType::Nearest),
                class: s.class,
            })
            .collect();
        let a = train(&data, &spec, &cfg).unwrap();
        let b = train(&data, &spec, &cfg).unwrap();
        assert_eq!(a.log(), b.log());
        assert_eq!(a.weights_blob(), b.weights_blob());
        let c = train(&data, &spec, &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.weights_blob(), c.weights_blob());
    }

    #[test]
    fn empty_class_is_named() {
        let data: Vec<_> = separable(10, 3).into_iter().filter(|s| s.class == 0).collect();
        let err = train(&data, &linear_spec(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::EmptyClass(c) if c == "HP"), "{err}");
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&separable(4, 4), &linear_spec(), &cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn data_hash_tracks_content() {
        let a = separable(4, 5);
        let mut b = a.clone();
        assert_eq!(data_hash(&a), data_hash(&b));
        b[0].class = 1 - b[0].class;
        assert_ne!(data_hash(&a), data_hash(&b));
    }
}
