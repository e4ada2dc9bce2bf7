//! Closed-form classifiers that read the synthetic cues directly.
//!
//! Each oracle first decides whether its input is at its designed scale
//! using the pixel noise floor: full-detail fine crops keep the generator's
//! noise, while a whole field shrunk to network input size averages it
//! away. Off-scale inputs get a uniform distribution.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::model::{TrainedModel, TrainingFingerprint, Weights};
use super::{BackboneKind, ClassifierSpec, InputPolicy, Task};
use crate::config::KvConfig;
use crate::dataset::cues::{detail_energy, gland_fraction, noise_floor, nucleus_count};
use crate::dataset::SynthConfig;
use crate::error::{Error, Result};

/// Smallest input an oracle accepts (the nucleus detector needs 4 columns).
pub(super) const MIN_SIDE: u32 = 4;

/// Probability mass given to the decided class of a binary oracle.
const CONFIDENCE_2: f64 = 0.995;
/// Probability mass given to the decided class of a ternary oracle.
const CONFIDENCE_3: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleTask {
    Hp,
    Adenoma,
    Grade,
}

impl OracleTask {
    pub fn task(self) -> Task {
        match self {
            OracleTask::Hp => Task::Hp,
            OracleTask::Adenoma => Task::Adenoma,
            OracleTask::Grade => Task::Grade,
        }
    }

    pub fn input_policy(self) -> InputPolicy {
        match self {
            OracleTask::Hp | OracleTask::Adenoma => InputPolicy::Fixed224,
            OracleTask::Grade => InputPolicy::VariableFullRes,
        }
    }
}

impl std::str::FromStr for OracleTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hp" => Ok(OracleTask::Hp),
            "adenoma" => Ok(OracleTask::Adenoma),
            "grade" => Ok(OracleTask::Grade),
            _ => Err(Error::invalid(format!(
                "unknown oracle task `{s}` (expected hp, adenoma or grade)"
            ))),
        }
    }
}

/// Thresholds derived from the generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueOracle {
    pub task: OracleTask,
    /// Noise floor separating fine-detail inputs (above) from shrunk fields.
    pub scale_floor: f64,
    /// Detail energy above which a fine crop shows serration texture.
    pub hp_energy: f64,
    pub gland_gray_threshold: f32,
    /// Gland fractions separating NORM | TA | TVA.
    pub gland_cuts: (f64, f64),
    pub nucleus_contrast: f32,
    /// Fine-cell side in pixels; nucleus counts are normalized to this area.
    pub fine_side_px: u32,
    /// Normalized nucleus counts below this are off-scale.
    pub nuclei_min: f64,
    /// Normalized nucleus counts at or above this are high grade.
    pub nuclei_hg: f64,
}

impl CueOracle {
    pub fn from_synth(task: OracleTask, cfg: &SynthConfig) -> Result<Self> {
        cfg.validate().map_err(Error::InvalidArgument)?;
        if cfg.noise_amp == 0 {
            return Err(Error::invalid("oracles need noise_amp > 0 to tell scales apart"));
        }
        Ok(CueOracle {
            task,
            scale_floor: cfg.noise_amp as f64 / 6.0,
            hp_energy: cfg.hp_texture_amp as f64 / 2.0,
            gland_gray_threshold: cfg.gland_gray_threshold(),
            gland_cuts: (
                (cfg.gland_low.1 + cfg.gland_ta.0) / 2.0,
                (cfg.gland_ta.1 + cfg.gland_tva.0) / 2.0,
            ),
            nucleus_contrast: cfg.nucleus_contrast as f32,
            fine_side_px: cfg.fine_spec()?.side_px(),
            nuclei_min: cfg.lg_nuclei.0 / 2.0,
            nuclei_hg: (cfg.lg_nuclei.1 + cfg.hg_nuclei.0) / 2.0,
        })
    }

    fn is_fine_detail(&self, img: &RgbImage) -> bool {
        noise_floor(img) >= self.scale_floor
    }

    pub fn probs(&self, img: &RgbImage) -> Vec<f64> {
        let one_hot = |n: usize, k: usize| {
            let conf = if n == 2 { CONFIDENCE_2 } else { CONFIDENCE_3 };
            let rest = (1.0 - conf) / (n - 1) as f64;
            (0..n).map(|i| if i == k { conf } else { rest }).collect()
        };
        let uniform = |n: usize| vec![1.0 / n as f64; n];
        match self.task {
            OracleTask::Hp => {
                if !self.is_fine_detail(img) {
                    uniform(2)
                } else {
                    one_hot(2, (detail_energy(img) > self.hp_energy) as usize)
                }
            }
            OracleTask::Adenoma => {
                if self.is_fine_detail(img) {
                    uniform(3)
                } else {
                    let g = gland_fraction(img, self.gland_gray_threshold);
                    let k = if g < self.gland_cuts.0 {
                        0
                    } else if g < self.gland_cuts.1 {
                        1
                    } else {
                        2
                    };
                    one_hot(3, k)
                }
            }
            OracleTask::Grade => {
                let area = (img.width() as f64 * img.height() as f64) / (self.fine_side_px as f64).powi(2);
                let density = nucleus_count(img, self.nucleus_contrast) as f64 / area;
                if density < self.nuclei_min {
                    uniform(2)
                } else {
                    one_hot(2, (density >= self.nuclei_hg) as usize)
                }
            }
        }
    }
}

/// Builds an oracle model for `task` from the generator parameters.
pub fn mock_oracle_backbone(task: OracleTask, cfg: &SynthConfig) -> Result<TrainedModel> {
    let t = task.task();
    let spec = ClassifierSpec {
        n_classes: t.n_classes(),
        input_policy: task.input_policy(),
        pretrained: false,
        task_tag: format!("{}_oracle", t.tag()),
        class_names: t.class_names().iter().map(|s| s.to_string()).collect(),
        backbone: BackboneKind::CueOracle { task },
    };
    let oracle = CueOracle::from_synth(task, cfg)?;
    let fingerprint = TrainingFingerprint {
        config: None,
        data_hash: format!("synth:{}", cfg.to_kv_string().replace('\n', ";")),
    };
    Ok(TrainedModel::new(
        spec,
        Weights::Oracle(oracle),
        fingerprint,
        Vec::new(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Classifier;
    use crate::dataset::synth::render_parent;
    use crate::dataset::PolypLabel;
    use crate::scalespace::{crop, downsample, resample_area, NETWORK_INPUT_SIDE};

    fn cfg() -> SynthConfig {
        SynthConfig::default()
    }

    #[test]
    fn thresholds_at_defaults() {
        let o = CueOracle::from_synth(OracleTask::Grade, &cfg()).unwrap();
        assert_eq!(o.scale_floor, 1.0);
        assert_eq!(o.hp_energy, 8.0);
        assert!((o.gland_cuts.0 - 0.175).abs() < 1e-12 && (o.gland_cuts.1 - 0.375).abs() < 1e-12);
        assert_eq!((o.nuclei_min, o.nuclei_hg, o.fine_side_px), (2.0, 26.0, 181));
    }

    #[test]
    fn hp_oracle_on_fine_crop_and_coarse_field() {
        let c = cfg();
        let hp = mock_oracle_backbone(OracleTask::Hp, &c).unwrap();
        let parent = render_parent(&c, PolypLabel::Hp, 5).unwrap();
        let fine = crop(&parent, (181, 362), 181).unwrap();
        let p = hp
            .predict_proba(&resample_area(&fine, NETWORK_INPUT_SIDE, NETWORK_INPUT_SIDE))
            .unwrap();
        assert!(p[1] >= 0.99, "{p:?}");
        let field = downsample(&parent, NETWORK_INPUT_SIDE).unwrap();
        let p = hp.predict_proba(&field).unwrap();
        assert!((p[0] - 0.5).abs() <= 0.01 && (p[1] - 0.5).abs() <= 0.01, "{p:?}");
    }

    #[test]
    fn grade_oracle_on_lg_crop() {
        let c = cfg();
        let grade = mock_oracle_backbone(OracleTask::Grade, &c).unwrap();
        let parent = render_parent(&c, PolypLabel::TaLg, 6).unwrap();
        let p = grade.predict_proba(&crop(&parent, (0, 0), 181).unwrap()).unwrap();
        assert!(p[1] <= 0.01, "{p:?}");
        let parent = render_parent(&c, PolypLabel::TvaHg, 7).unwrap();
        let p = grade.predict_proba(&crop(&parent, (181, 0), 181).unwrap()).unwrap();
        assert!(p[1] >= 0.99, "{p:?}");
    }

    #[test]
    fn adenoma_oracle_reads_coarse_field_only() {
        let c = cfg();
        let ad = mock_oracle_backbone(OracleTask::Adenoma, &c).unwrap();
        for (label, want) in [(PolypLabel::Norm, 0), (PolypLabel::TaHg, 1), (PolypLabel::TvaLg, 2)] {
            let parent = render_parent(&c, label, 8).unwrap();
            let p = ad
                .predict_proba(&downsample(&parent, NETWORK_INPUT_SIDE).unwrap())
                .unwrap();
            assert_eq!(crate::backbone::argmax(&p), want, "{label}: {p:?}");
            let fine = resample_area(&crop(&parent, (0, 0), 181).unwrap(), 224, 224);
            assert_eq!(ad.predict_proba(&fine).unwrap(), vec![1.0 / 3.0; 3]);
        }
    }

    #[test]
    fn probabilities_are_normalized() {
        let c = cfg();
        let parent = render_parent(&c, PolypLabel::TaHg, 9).unwrap();
        let field = downsample(&parent, 224).unwrap();
        for task in [OracleTask::Hp, OracleTask::Adenoma, OracleTask::Grade] {
            let m = mock_oracle_backbone(task, &c).unwrap();
            let p = m.predict_proba(&field).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
