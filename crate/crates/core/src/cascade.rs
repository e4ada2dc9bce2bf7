//! Three-stage multi-resolution cascade.
//!
//! 1. HP: mean HP probability over the fine sub-patch grid, each sub-patch
//!    resampled to network input size. Fires iff the mean exceeds `t_hp`.
//! 2. Type: the whole coarse field resampled to network input size, argmax
//!    over NORM / TA / TVA. NORM stops the cascade.
//! 3. Grade: the same fine grid at native resolution; the patch is HG iff
//!    the share of sub-patches with `p(HG) > 0.5` exceeds `t_d`.

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, Classifier, InputPolicy};
use crate::config::{parse_value, KvConfig};
use crate::dataset::{Grade, PolypLabel, PolypType};
use crate::error::{Error, Result};
use crate::scalespace::{crop, downsample, tile_grid, ScaleSpec, NETWORK_INPUT_SIDE, SCANNER_MPP};

/// Per-sub-patch vote threshold on `p(HG)`.
pub const HG_VOTE_THRESHOLD: f64 = 0.5;

/// Adenoma-stage class order; also the argmax tie-break order.
pub const TYPE_ORDER: [PolypType; 3] = [PolypType::Norm, PolypType::Ta, PolypType::Tva];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub sigma_fine_um: f64,
    pub sigma_coarse_um: f64,
    pub t_hp: f64,
    pub t_d: f64,
    pub mpp: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            sigma_fine_um: 800.0,
            sigma_coarse_um: 7000.0,
            t_hp: 0.5,
            t_d: 0.2,
            mpp: SCANNER_MPP,
        }
    }
}

impl KvConfig for CascadeConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "sigma_fine_um" => self.sigma_fine_um = parse_value(key, value)?,
            "sigma_coarse_um" => self.sigma_coarse_um = parse_value(key, value)?,
            "t_hp" => self.t_hp = parse_value(key, value)?,
            "t_d" => self.t_d = parse_value(key, value)?,
            "mpp" => self.mpp = parse_value(key, value)?,
            _ => return Err(format!("unknown cascade key `{key}`")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("sigma_fine_um", self.sigma_fine_um.to_string()),
            ("sigma_coarse_um", self.sigma_coarse_um.to_string()),
            ("t_hp", self.t_hp.to_string()),
            ("t_d", self.t_d.to_string()),
            ("mpp", self.mpp.to_string()),
        ]
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.t_hp > 0.0 && self.t_hp < 1.0) {
            return Err(format!("t_hp must lie in (0, 1), got {}", self.t_hp));
        }
        if !(0.0..=1.0).contains(&self.t_d) {
            return Err(format!("t_d must lie in [0, 1], got {}", self.t_d));
        }
        if !(self.sigma_fine_um < self.sigma_coarse_um) {
            return Err("sigma_fine_um must be smaller than sigma_coarse_um".into());
        }
        self.fine_spec().map_err(|e| e.to_string())?;
        self.coarse_spec().map_err(|e| e.to_string())?;
        Ok(())
    }
}

impl CascadeConfig {
    pub fn fine_spec(&self) -> Result<ScaleSpec> {
        ScaleSpec::new(self.sigma_fine_um, self.mpp)
    }

    pub fn coarse_spec(&self) -> Result<ScaleSpec> {
        ScaleSpec::new(self.sigma_coarse_um, self.mpp)
    }
}

/// Everything the cascade computed for one patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_id: Option<String>,
    pub hp_mean_prob: f64,
    /// NORM, TA, TVA; absent when stage 1 fired.
    pub adenoma_probs: Option<[f64; 3]>,
    /// Absent unless stage 3 ran.
    pub hg_ratio: Option<f64>,
    pub n_subpatches: usize,
    #[serde(rename = "final")]
    pub final_label: PolypLabel,
    pub stage_fired: u8,
}

impl CascadeResult {
    /// Checks the label/stage structure.
    pub fn is_consistent(&self) -> bool {
        let stage_ok = match self.final_label {
            PolypLabel::Hp => self.stage_fired == 1,
            PolypLabel::Norm => self.stage_fired == 2,
            _ => self.stage_fired == 3,
        };
        let fields_ok = match self.stage_fired {
            1 => self.adenoma_probs.is_none() && self.hg_ratio.is_none(),
            2 => self.adenoma_probs.is_some() && self.hg_ratio.is_none(),
            3 => self.adenoma_probs.is_some() && self.hg_ratio.is_some(),
            _ => false,
        };
        stage_ok && fields_ok
    }
}

/// Mean of `probs`, summed in sorted order so any permutation of the inputs
/// gives the same bits.
pub fn mean_probability(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::invalid("no sub-patch probabilities to average"));
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted.iter().sum::<f64>() / sorted.len() as f64)
}

/// Share of sub-patches voting HG.
pub fn hg_ratio(p_hg: &[f64]) -> Result<f64> {
    if p_hg.is_empty() {
        return Err(Error::invalid("no sub-patch grade predictions"));
    }
    let votes = p_hg.iter().filter(|&&p| p > HG_VOTE_THRESHOLD).count();
    Ok(votes as f64 / p_hg.len() as f64)
}

/// HG iff the ratio strictly exceeds `t_d`.
pub fn grade_decision(ratio: f64, t_d: f64) -> Grade {
    if ratio > t_d {
        Grade::High
    } else {
        Grade::Low
    }
}

/// Argmax over NORM / TA / TVA; ties resolve to the earlier type.
pub fn type_decision(probs: &[f64; 3]) -> PolypType {
    TYPE_ORDER[argmax(probs)]
}

/// Stage outputs as recorded from the models, before any decision.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutputs {
    pub hp_probs: Vec<f64>,
    pub adenoma_probs: Option<[f64; 3]>,
    pub hg_probs: Option<Vec<f64>>,
}

/// Applies the cascade rules to recorded stage outputs. Stages that the
/// rules reach must have outputs.
pub fn decide(outputs: &StageOutputs, cfg: &CascadeConfig) -> Result<CascadeResult> {
    let hp_mean_prob = mean_probability(&outputs.hp_probs)?;
    let n_subpatches = outputs.hp_probs.len();
    let mut result = CascadeResult {
        patch_id: None,
        hp_mean_prob,
        adenoma_probs: None,
        hg_ratio: None,
        n_subpatches,
        final_label: PolypLabel::Hp,
        stage_fired: 1,
    };
    if hp_mean_prob > cfg.t_hp {
        return Ok(result);
    }
    let probs = outputs
        .adenoma_probs
        .ok_or_else(|| Error::invalid("stage 2 reached without adenoma probabilities"))?;
    result.adenoma_probs = Some(probs);
    let ptype = type_decision(&probs);
    if ptype == PolypType::Norm {
        result.final_label = PolypLabel::Norm;
        result.stage_fired = 2;
        return Ok(result);
    }
    let hg = outputs
        .hg_probs
        .as_ref()
        .ok_or_else(|| Error::invalid("stage 3 reached without grade probabilities"))?;
    let ratio = hg_ratio(hg)?;
    result.hg_ratio = Some(ratio);
    result.final_label = PolypLabel::from_parts(ptype, Some(grade_decision(ratio, cfg.t_d)))?;
    result.stage_fired = 3;
    Ok(result)
}

fn check_model(model: &dyn Classifier, role: &str, n_classes: usize, policy: InputPolicy) -> Result<()> {
    let spec = model.spec();
    if spec.n_classes != n_classes {
        return Err(Error::invalid(format!(
            "{role} model `{}` has {} classes, expected {n_classes}",
            spec.task_tag, spec.n_classes
        )));
    }
    if spec.input_policy != policy {
        return Err(Error::invalid(format!(
            "{role} model `{}` has input policy {}, expected {policy}",
            spec.task_tag, spec.input_policy
        )));
    }
    Ok(())
}

/// The three cascade classifiers.
#[derive(Clone, Copy)]
pub struct CascadeModels<'a> {
    pub hp: &'a dyn Classifier,
    pub adenoma: &'a dyn Classifier,
    pub grade: &'a dyn Classifier,
}

impl CascadeModels<'_> {
    /// Checks arities and input policies.
    pub fn validate(&self) -> Result<()> {
        check_model(self.hp, "HP", 2, InputPolicy::Fixed224)?;
        self.hp.spec().class_index("HP")?;
        check_model(self.adenoma, "adenoma", 3, InputPolicy::Fixed224)?;
        for t in TYPE_ORDER {
            self.adenoma.spec().class_index(t.as_str())?;
        }
        check_model(self.grade, "grade", 2, InputPolicy::VariableFullRes)?;
        self.grade.spec().class_index(Grade::High.as_str())?;
        Ok(())
    }
}

/// Fine sub-patches of a coarse patch at native resolution, in grid order.
pub fn fine_subpatches(patch_coarse: &RgbImage, cfg: &CascadeConfig) -> Result<Vec<RgbImage>> {
    let coarse = cfg.coarse_spec()?.side_px();
    if patch_coarse.dimensions() != (coarse, coarse) {
        return Err(Error::invalid(format!(
            "coarse patch must be {coarse}x{coarse} px at {} um/px, got {}x{}",
            cfg.mpp,
            patch_coarse.width(),
            patch_coarse.height()
        )));
    }
    let fine = cfg.fine_spec()?.side_px();
    let grid = tile_grid(coarse, coarse, fine)?;
    if grid.is_empty() {
        return Err(Error::invalid(format!("coarse patch holds no {fine} px sub-patch")));
    }
    grid.origins.iter().map(|&o| crop(patch_coarse, o, fine)).collect()
}

fn class_probs(model: &dyn Classifier, images: &[RgbImage], class: usize) -> Result<Vec<f64>> {
    images
        .par_iter()
        .map(|img| model.predict_proba(img).map(|p| p[class]))
        .collect()
}

fn hp_probs(subpatches: &[RgbImage], model: &dyn Classifier) -> Result<Vec<f64>> {
    let hp = model.spec().class_index("HP")?;
    let inputs: Vec<RgbImage> = subpatches
        .par_iter()
        .map(|s| downsample(s, NETWORK_INPUT_SIDE))
        .collect::<Result<_>>()?;
    class_probs(model, &inputs, hp)
}

fn adenoma_probs(patch_coarse: &RgbImage, model: &dyn Classifier) -> Result<[f64; 3]> {
    let spec = model.spec();
    if spec.n_classes != 3 {
        return Err(Error::invalid(format!(
            "adenoma model `{}` has {} classes, expected 3",
            spec.task_tag, spec.n_classes
        )));
    }
    let p = model.predict_proba(&downsample(patch_coarse, NETWORK_INPUT_SIDE)?)?;
    let mut out = [0.0; 3];
    for (slot, t) in out.iter_mut().zip(TYPE_ORDER) {
        *slot = p[spec.class_index(t.as_str())?];
    }
    Ok(out)
}

fn hg_probs(subpatches: &[RgbImage], model: &dyn Classifier) -> Result<Vec<f64>> {
    let hg = model.spec().class_index(Grade::High.as_str())?;
    class_probs(model, subpatches, hg)
}

/// Stage 1: mean HP probability over the fine grid.
pub fn hp_stage(patch_coarse: &RgbImage, model: &dyn Classifier, cfg: &CascadeConfig) -> Result<f64> {
    check_model(model, "HP", 2, InputPolicy::Fixed224)?;
    mean_probability(&hp_probs(&fine_subpatches(patch_coarse, cfg)?, model)?)
}

/// Stage 2: NORM / TA / TVA probabilities of the whole coarse field.
pub fn adenoma_stage(patch_coarse: &RgbImage, model: &dyn Classifier) -> Result<[f64; 3]> {
    adenoma_probs(patch_coarse, model)
}

/// Stage 3: HG vote ratio over the fine grid at native resolution.
pub fn grade_stage(patch_coarse: &RgbImage, model: &dyn Classifier, cfg: &CascadeConfig) -> Result<(f64, Grade)> {
    check_model(model, "grade", 2, InputPolicy::VariableFullRes)?;
    let ratio = hg_ratio(&hg_probs(&fine_subpatches(patch_coarse, cfg)?, model)?)?;
    Ok((ratio, grade_decision(ratio, cfg.t_d)))
}

/// Runs the models the rules reach and records their outputs.
pub fn run_stages(patch_coarse: &RgbImage, models: CascadeModels<'_>, cfg: &CascadeConfig) -> Result<StageOutputs> {
    cfg.validate().map_err(Error::InvalidArgument)?;
    models.validate()?;
    let subpatches = fine_subpatches(patch_coarse, cfg)?;
    let mut out = StageOutputs {
        hp_probs: hp_probs(&subpatches, models.hp)?,
        adenoma_probs: None,
        hg_probs: None,
    };
    if mean_probability(&out.hp_probs)? > cfg.t_hp {
        return Ok(out);
    }
    let probs = adenoma_probs(patch_coarse, models.adenoma)?;
    out.adenoma_probs = Some(probs);
    if type_decision(&probs) == PolypType::Norm {
        return Ok(out);
    }
    out.hg_probs = Some(hg_probs(&subpatches, models.grade)?);
    Ok(out)
}

/// Classifies one coarse patch.
pub fn classify_patch(
    patch_coarse: &RgbImage,
    models: CascadeModels<'_>,
    cfg: &CascadeConfig,
) -> Result<CascadeResult> {
    decide(&run_stages(patch_coarse, models, cfg)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Architecture, ClassifierSpec, Task};
    use crate::config::apply_kv;
    use image::Rgb;
    use proptest::prelude::*;

    /// Emits fixed probabilities; the first channel of pixel (0,0) selects
    /// the row of `table`.
    struct Scripted {
        spec: ClassifierSpec,
        table: Vec<Vec<f64>>,
    }

    impl Scripted {
        fn new(task: Task, policy: InputPolicy, table: Vec<Vec<f64>>) -> Self {
            Scripted {
                spec: ClassifierSpec::for_task(task, policy, Architecture::Linear),
                table,
            }
        }
    }

    impl Classifier for Scripted {
        fn spec(&self) -> &ClassifierSpec {
            &self.spec
        }

        fn predict_proba(&self, img: &RgbImage) -> Result<Vec<f64>> {
            self.spec.check_input(img)?;
            Ok(self.table[img.get_pixel(0, 0)[0] as usize % self.table.len()].clone())
        }
    }

    /// Small geometry: 64 px coarse patch, 8 px fine tiles (8×8 grid).
    fn small_cfg() -> CascadeConfig {
        CascadeConfig {
            sigma_fine_um: 8.0,
            sigma_coarse_um: 64.0,
            mpp: 1.0,
            ..CascadeConfig::default()
        }
    }

    fn blank() -> RgbImage {
        RgbImage::from_pixel(64, 64, Rgb([0, 0, 0]))
    }

    #[test]
    fn defaults_and_config_file() {
        let cfg = CascadeConfig::default();
        assert_eq!(
            (cfg.sigma_fine_um, cfg.sigma_coarse_um, cfg.t_hp, cfg.t_d, cfg.mpp),
            (800.0, 7000.0, 0.5, 0.2, 0.4415)
        );
        assert_eq!(cfg.fine_spec().unwrap().side_px(), 1812);
        let mut c = CascadeConfig::default();
        apply_kv(&mut c, "t_d = 0.0\n").unwrap();
        assert_eq!(c.t_d, 0.0);
        assert!(apply_kv(&mut c, "t_hp = 1.0\n").is_err());
        let mut c = CascadeConfig::default();
        assert!(apply_kv(&mut c, "sigma_fine_um = 9000\n").is_err());
    }

    #[test]
    fn hp_mean_arithmetic() {
        assert_eq!(mean_probability(&[1.0; 64]).unwrap(), 1.0);
        let mut probs = vec![0.9; 32];
        probs.extend([0.1; 32]);
        assert!((mean_probability(&probs).unwrap() - 0.5).abs() < 1e-12);
        assert!(mean_probability(&[]).is_err());
    }

    #[test]
    fn grade_ratio_boundaries() {
        let votes = |hg: usize, n: usize| -> Vec<f64> { (0..n).map(|i| if i < hg { 0.9 } else { 0.1 }).collect() };
        let r = hg_ratio(&votes(13, 64)).unwrap();
        assert_eq!(r, 0.203125);
        assert_eq!(grade_decision(r, 0.2), Grade::High);
        let r = hg_ratio(&votes(5, 25)).unwrap();
        assert_eq!(r, 0.2);
        assert_eq!(grade_decision(r, 0.2), Grade::Low);
        assert_eq!(grade_decision(hg_ratio(&votes(0, 64)).unwrap(), 0.2), Grade::Low);
        // A vote needs p(HG) strictly above one half.
        assert_eq!(hg_ratio(&[0.5, 0.5000001]).unwrap(), 0.5);
    }

    #[test]
    fn type_argmax_and_ties() {
        assert_eq!(type_decision(&[0.2, 0.5, 0.3]), PolypType::Ta);
        assert_eq!(type_decision(&[0.4, 0.4, 0.2]), PolypType::Norm);
        assert_eq!(type_decision(&[0.2, 0.4, 0.4]), PolypType::Ta);
    }

    #[test]
    fn hp_short_circuit() {
        let cfg = small_cfg();
        let hp = Scripted::new(Task::Hp, InputPolicy::Fixed224, vec![vec![0.0, 1.0]]);
        // These would fail if called: wrong input policy for the grade model.
        let adenoma = Scripted::new(Task::Adenoma, InputPolicy::Fixed224, vec![vec![0.0, 0.0, 1.0]]);
        let grade = Scripted::new(Task::Grade, InputPolicy::VariableFullRes, vec![vec![0.0, 1.0]]);
        let models = CascadeModels {
            hp: &hp,
            adenoma: &adenoma,
            grade: &grade,
        };
        let r = classify_patch(&blank(), models, &cfg).unwrap();
        assert_eq!((r.final_label, r.stage_fired, r.n_subpatches), (PolypLabel::Hp, 1, 64));
        assert_eq!(r.hp_mean_prob, 1.0);
        assert!(r.is_consistent());
    }

    #[test]
    fn full_cascade_with_scripted_models() {
        let cfg = small_cfg();
        // 13 of 64 tiles marked (first channel 1) vote HG.
        let mut img = blank();
        for k in 0..13u32 {
            let (x, y) = ((k % 8) * 8, (k / 8) * 8);
            img.put_pixel(x, y, Rgb([1, 0, 0]));
        }
        let hp = Scripted::new(Task::Hp, InputPolicy::Fixed224, vec![vec![0.9, 0.1]]);
        let adenoma = Scripted::new(Task::Adenoma, InputPolicy::Fixed224, vec![vec![0.2, 0.3, 0.5]]);
        let grade = Scripted::new(
            Task::Grade,
            InputPolicy::VariableFullRes,
            vec![vec![0.8, 0.2], vec![0.3, 0.7]],
        );
        let models = CascadeModels {
            hp: &hp,
            adenoma: &adenoma,
            grade: &grade,
        };
        let r = classify_patch(&img, models, &cfg).unwrap();
        assert_eq!(r.hg_ratio, Some(0.203125));
        assert_eq!((r.final_label, r.stage_fired), (PolypLabel::TvaHg, 3));
        let r = classify_patch(
            &img,
            models,
            &CascadeConfig {
                t_d: 0.25,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(r.final_label, PolypLabel::TvaLg);

        let norm = Scripted::new(Task::Adenoma, InputPolicy::Fixed224, vec![vec![0.4, 0.4, 0.2]]);
        let r = classify_patch(
            &img,
            CascadeModels {
                adenoma: &norm,
                ..models
            },
            &cfg,
        )
        .unwrap();
        assert_eq!((r.final_label, r.stage_fired, r.hg_ratio), (PolypLabel::Norm, 2, None));
    }

    #[test]
    fn model_arity_and_policy_checked() {
        let cfg = small_cfg();
        let hp = Scripted::new(Task::Hp, InputPolicy::Fixed224, vec![vec![0.9, 0.1]]);
        let six = Scripted::new(Task::SixClass, InputPolicy::Fixed224, vec![vec![1.0 / 6.0; 6]]);
        let grade = Scripted::new(Task::Grade, InputPolicy::VariableFullRes, vec![vec![0.8, 0.2]]);
        let err = classify_patch(
            &blank(),
            CascadeModels {
                hp: &hp,
                adenoma: &six,
                grade: &grade,
            },
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        assert!(adenoma_stage(&blank(), &six).is_err());
        let fixed_grade = Scripted::new(Task::Grade, InputPolicy::Fixed224, vec![vec![0.8, 0.2]]);
        assert!(grade_stage(&blank(), &fixed_grade, &cfg).is_err());
    }

    #[test]
    fn wrong_patch_size_rejected() {
        let hp = Scripted::new(Task::Hp, InputPolicy::Fixed224, vec![vec![0.9, 0.1]]);
        let err = hp_stage(&RgbImage::new(63, 63), &hp, &small_cfg()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn result_json_round_trip() {
        let r = CascadeResult {
            patch_id: Some("s1_s7000_x0_y0".into()),
            hp_mean_prob: 0.25,
            adenoma_probs: Some([0.1, 0.2, 0.7]),
            hg_ratio: Some(0.5),
            n_subpatches: 64,
            final_label: PolypLabel::TvaHg,
            stage_fired: 3,
        };
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"final\":\"TVA.HG\""));
        assert_eq!(serde_json::from_str::<CascadeResult>(&json).unwrap(), r);
    }

    fn arb_outputs() -> impl Strategy<Value = StageOutputs> {
        (
            prop::collection::vec(0.0f64..=1.0, 1..70),
            prop::array::uniform3(0.0f64..1.0),
            prop::collection::vec(0.0f64..=1.0, 1..70),
        )
            .prop_map(|(hp, a, hg)| {
                let z: f64 = a.iter().sum::<f64>() + 1e-9;
                StageOutputs {
                    hp_probs: hp,
                    adenoma_probs: Some(a.map(|v| v / z)),
                    hg_probs: Some(hg),
                }
            })
    }

    proptest! {
        #[test]
        fn shuffling_subpatches_changes_nothing(out in arb_outputs(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let cfg = CascadeConfig::default();
            let base = decide(&out, &cfg).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut shuffled = out.clone();
            shuffled.hp_probs.shuffle(&mut rng);
            shuffled.hg_probs.as_mut().unwrap().shuffle(&mut rng);
            prop_assert_eq!(decide(&shuffled, &cfg).unwrap(), base);
        }

        #[test]
        fn results_are_structurally_consistent(out in arb_outputs(), t_hp in 0.01f64..0.99, t_d in 0.0f64..=1.0) {
            let cfg = CascadeConfig { t_hp, t_d, ..CascadeConfig::default() };
            prop_assert!(decide(&out, &cfg).unwrap().is_consistent());
        }

        #[test]
        fn raising_t_d_never_creates_hg(out in arb_outputs(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = (a.min(b), a.max(b));
            let at = |t_d| decide(&out, &CascadeConfig { t_d, ..CascadeConfig::default() }).unwrap().final_label;
            if at(hi).grade() == Some(Grade::High) {
                prop_assert_eq!(at(lo).grade(), Some(Grade::High));
            }
        }

        #[test]
        fn raising_t_hp_never_creates_hp(out in arb_outputs(), a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (lo, hi) = (a.min(b), a.max(b));
            let at = |t_hp| decide(&out, &CascadeConfig { t_hp, ..CascadeConfig::default() }).unwrap().final_label;
            if at(hi) == PolypLabel::Hp {
                prop_assert_eq!(at(lo), PolypLabel::Hp);
            }
        }

        #[test]
        fn stage_one_mean_matches_brute_force(probs in prop::collection::vec(0.0f64..=1.0, 1..100)) {
            let brute = probs.iter().sum::<f64>() / probs.len() as f64;
            prop_assert!((mean_probability(&probs).unwrap() - brute).abs() < 1e-9);
        }
    }
}
