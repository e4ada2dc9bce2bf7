//! Glue between a manifest-indexed corpus and the models: per-scale sample
//! preparation, task training, single-scale baselines, the scale sweep,
//! batch cascade inference and evaluation.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{
    argmax, train_with, Architecture, Classifier, ClassifierSpec, EpochLog, InputPolicy, LabeledImage, Task,
    TrainConfig, TrainedModel,
};
use crate::cascade::{classify_patch, CascadeConfig, CascadeModels, CascadeResult};
use crate::dataset::synth::stream_seed;
use crate::dataset::{Manifest, PatchRecord, PolypLabel, PolypType, Split};
use crate::error::{Error, Result};
use crate::metrics::{
    balanced_accuracy, collapse_to_type, one_vs_rest_report, six_class_matrix, ClassReport, ConfusionMatrix,
};
use crate::scalespace::{crop, read_png, resample_area, tile_grid, ScaleSpec, NETWORK_INPUT_SIDE};

/// Scales are compared with this tolerance (µm).
const SCALE_EPS: f64 = 1e-9;

/// A manifest plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Corpus {
    /// Reads `manifest_csv`; patch paths resolve against its directory.
    pub fn open(manifest_csv: &Path, mpp: f64) -> Result<Self> {
        let manifest = Manifest::read_csv(manifest_csv, mpp)?;
        let root = manifest_csv.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Corpus { root, manifest })
    }

    pub fn image(&self, rec: &PatchRecord) -> Result<RgbImage> {
        let path = self.root.join(&rec.path);
        let img = read_png(&path)?;
        if img.dimensions() != (rec.side_px, rec.side_px) {
            return Err(Error::parse(
                &path,
                format!(
                    "expected {0}x{0} px, found {1}x{2}",
                    rec.side_px,
                    img.width(),
                    img.height()
                ),
            ));
        }
        Ok(img)
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &PatchRecord> {
        self.manifest.records.iter().filter(move |r| r.split == split)
    }
}

/// How many grid crops to take from each parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropPolicy {
    All,
    /// A seeded subset of at most this many tiles per parent.
    PerParent(usize),
}

/// How to turn corpus records into model inputs at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub sigma_um: f64,
    pub policy: InputPolicy,
    pub crops: CropPolicy,
    pub seed: u64,
}

/// One model input with its provenance.
#[derive(Debug, Clone)]
pub struct PatchSample {
    pub source_id: String,
    pub label: PolypLabel,
    pub image: RgbImage,
}

/// Records that supply samples at `sigma_um`: those at exactly that scale
/// if any exist, otherwise every larger-scale record (to be cropped).
fn source_records(manifest: &Manifest, sigma_um: f64) -> Result<(Vec<&PatchRecord>, bool)> {
    let exact: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| (r.scale_um - sigma_um).abs() < SCALE_EPS)
        .collect();
    if !exact.is_empty() {
        return Ok((exact, false));
    }
    let larger: Vec<_> = manifest.records.iter().filter(|r| r.scale_um > sigma_um).collect();
    if larger.is_empty() {
        return Err(Error::MissingScale(sigma_um));
    }
    Ok((larger, true))
}

fn id_seed(seed: u64, id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    stream_seed(seed, &[u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))])
}

fn to_policy(img: RgbImage, policy: InputPolicy) -> RgbImage {
    match policy {
        InputPolicy::Fixed224 => resample_area(&img, NETWORK_INPUT_SIDE, NETWORK_INPUT_SIDE),
        InputPolicy::VariableFullRes => img,
    }
}

/// Samples of `split` whose label passes `keep`, in manifest order.
pub fn prepare_samples(
    corpus: &Corpus,
    split: Split,
    cfg: &SampleConfig,
    keep: impl Fn(PolypLabel) -> bool + Sync,
) -> Result<Vec<PatchSample>> {
    let (records, cropped) = source_records(&corpus.manifest, cfg.sigma_um)?;
    let side = ScaleSpec::new(cfg.sigma_um, corpus.manifest.mpp)?.side_px();
    let chosen: Vec<&PatchRecord> = records
        .into_iter()
        .filter(|r| r.split == split && keep(r.label))
        .collect();
    let per_record = chosen
        .par_iter()
        .map(|rec| -> Result<Vec<PatchSample>> {
            let img = corpus.image(rec)?;
            if !cropped {
                return Ok(vec![PatchSample {
                    source_id: rec.patch_id.clone(),
                    label: rec.label,
                    image: to_policy(img, cfg.policy),
                }]);
            }
            let grid = tile_grid(img.width(), img.height(), side)?;
            let mut tiles: Vec<usize> = match cfg.crops {
                CropPolicy::PerParent(k) if k < grid.len() => {
                    let mut rng = ChaCha8Rng::seed_from_u64(id_seed(cfg.seed, &rec.patch_id));
                    sample(&mut rng, grid.len(), k).into_vec()
                }
                _ => (0..grid.len()).collect(),
            };
            tiles.sort_unstable();
            tiles
                .into_iter()
                .map(|t| {
                    Ok(PatchSample {
                        source_id: rec.patch_id.clone(),
                        label: rec.label,
                        image: to_policy(crop(&img, grid.origins[t], side)?, cfg.policy),
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_record.into_iter().flatten().collect())
}

/// Keeps the samples `task` maps and converts them to class indices.
pub fn task_samples(samples: Vec<PatchSample>, task: Task) -> Vec<LabeledImage> {
    samples
        .into_iter()
        .filter_map(|s| task.map(s.label).map(|class| LabeledImage { image: s.image, class }))
        .collect()
}

/// Everything needed to train one model on a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskTraining {
    pub task: Task,
    pub sigma_um: f64,
    /// Native-resolution inputs instead of 224² resampling.
    pub full_res: bool,
    pub crops: CropPolicy,
    pub arch: Architecture,
    pub train: TrainConfig,
}

impl TaskTraining {
    pub fn policy(&self) -> InputPolicy {
        if self.full_res {
            InputPolicy::VariableFullRes
        } else {
            InputPolicy::Fixed224
        }
    }

    pub fn spec(&self) -> ClassifierSpec {
        let mut spec = ClassifierSpec::for_task(self.task, self.policy(), self.arch.clone());
        spec.task_tag = format!("{}@{}um", self.task.tag(), self.sigma_um);
        spec
    }
}

/// Trains `t.task` on the train split.
pub fn train_task(corpus: &Corpus, t: &TaskTraining, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainedModel> {
    let cfg = SampleConfig {
        sigma_um: t.sigma_um,
        policy: t.policy(),
        crops: t.crops,
        seed: t.train.seed,
    };
    let samples = prepare_samples(corpus, Split::Train, &cfg, |l| t.task.map(l).is_some())?;
    train_with(&task_samples(samples, t.task), &t.spec(), &t.train, on_epoch)
}

/// Argmax class of every sample.
pub fn predict_classes(model: &dyn Classifier, samples: &[PatchSample]) -> Result<Vec<usize>> {
    samples
        .par_iter()
        .map(|s| model.predict_proba(&s.image).map(|p| argmax(&p)))
        .collect()
}

/// Six-class confusion matrix of a six-class model over test samples at
/// the model's training scale.
pub fn evaluate_six_class(
    corpus: &Corpus,
    model: &dyn Classifier,
    sigma_um: f64,
    seed: u64,
) -> Result<ConfusionMatrix> {
    if model.spec().n_classes != 6 {
        return Err(Error::invalid("six-class evaluation needs a six-class model"));
    }
    let cfg = SampleConfig {
        sigma_um,
        policy: model.spec().input_policy,
        crops: CropPolicy::All,
        seed,
    };
    let samples = prepare_samples(corpus, Split::Test, &cfg, |_| true)?;
    let predicted: Vec<PolypLabel> = predict_classes(model, &samples)?
        .into_iter()
        .map(|c| PolypLabel::ALL[c])
        .collect();
    let truth: Vec<PolypLabel> = samples.iter().map(|s| s.label).collect();
    six_class_matrix(&truth, &predicted)
}

/// One column of the BA-versus-scale table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scale_um: f64,
    pub n_test: u64,
    pub six_class_ba: f64,
    /// One-vs-rest BA per type after collapsing grades, in NORM, HP, TA,
    /// TVA order.
    pub type_ba: Vec<(String, f64)>,
    pub confusion: ConfusionMatrix,
}

impl SweepRow {
    pub fn from_confusion(scale_um: f64, confusion: ConfusionMatrix) -> Result<Self> {
        let report = one_vs_rest_report(&collapse_to_type(&confusion)?)?;
        let type_ba = [PolypType::Norm, PolypType::Hp, PolypType::Ta, PolypType::Tva]
            .iter()
            .map(|t| {
                let c = report.class(t.as_str()).expect("collapsed report lists every type");
                (t.as_str().to_string(), c.balanced_accuracy)
            })
            .collect();
        Ok(SweepRow {
            scale_um,
            n_test: confusion.total(),
            six_class_ba: balanced_accuracy(&confusion)?,
            type_ba,
            confusion,
        })
    }

    pub fn type_ba(&self, t: PolypType) -> f64 {
        self.type_ba
            .iter()
            .find(|(name, _)| name == t.as_str())
            .map(|(_, ba)| *ba)
            .expect("every type present")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, scale_um: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| (r.scale_um - scale_um).abs() < SCALE_EPS)
    }

    /// Scale with the highest value of `metric`; ties go to the smaller scale.
    pub fn best_scale(&self, metric: impl Fn(&SweepRow) -> f64) -> Option<f64> {
        let mut best: Option<&SweepRow> = None;
        for r in &self.rows {
            if best.is_none_or(|b| metric(r) > metric(b)) {
                best = Some(r);
            }
        }
        best.map(|r| r.scale_um)
    }

    /// Scales as columns; six-class BA then per-type BA as rows, rounded to
    /// two decimals.
    pub fn render(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = write!(s, "{:<14}", "scale [um]");
        for r in &self.rows {
            let _ = write!(s, "{:>8}", r.scale_um);
        }
        s.push('\n');
        let _ = write!(s, "{:<14}", "BA (6-class)");
        for r in &self.rows {
            let _ = write!(s, "{:>8.2}", crate::metrics::round2(r.six_class_ba));
        }
        s.push('\n');
        for t in [PolypType::Norm, PolypType::Hp, PolypType::Ta, PolypType::Tva] {
            let _ = write!(s, "{:<14}", t.as_str());
            for r in &self.rows {
                let _ = write!(s, "{:>8.2}", crate::metrics::round2(r.type_ba(t)));
            }
            s.push('\n');
        }
        s
    }
}

/// Settings shared by every baseline of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub scales: Vec<f64>,
    pub arch: Architecture,
    pub crops: CropPolicy,
    pub train: TrainConfig,
}

/// Events reported while a sweep runs.
pub enum SweepEvent<'a> {
    Training { scale_um: f64 },
    Epoch { scale_um: f64, log: &'a EpochLog },
    Evaluated { row: &'a SweepRow },
}

/// Trains and evaluates a six-class 224² baseline at every scale.
pub fn run_sweep(corpus: &Corpus, cfg: &SweepConfig, mut on_event: impl FnMut(SweepEvent<'_>)) -> Result<SweepReport> {
    if cfg.scales.is_empty() {
        return Err(Error::invalid("sweep needs at least one scale"));
    }
    // Fail before any training if a scale cannot be served.
    for &s in &cfg.scales {
        source_records(&corpus.manifest, s)?;
    }
    let mut rows = Vec::with_capacity(cfg.scales.len());
    for &scale_um in &cfg.scales {
        on_event(SweepEvent::Training { scale_um });
        let model = train_baseline(corpus, scale_um, cfg, |log| {
            on_event(SweepEvent::Epoch { scale_um, log })
        })?;
        let cm = evaluate_six_class(corpus, &model, scale_um, cfg.train.seed)?;
        let row = SweepRow::from_confusion(scale_um, cm)?;
        on_event(SweepEvent::Evaluated { row: &row });
        rows.push(row);
    }
    Ok(SweepReport { rows })
}

/// Six-class baseline at one scale with 224² inputs.
pub fn train_baseline(
    corpus: &Corpus,
    scale_um: f64,
    cfg: &SweepConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainedModel> {
    let t = TaskTraining {
        task: Task::SixClass,
        sigma_um: scale_um,
        full_res: false,
        crops: cfg.crops,
        arch: cfg.arch.clone(),
        train: cfg.train.clone(),
    };
    train_task(corpus, &t, on_epoch)
}

/// Coarse-scale records of `split` (all splits when `None`), the inputs of
/// cascade inference.
pub fn coarse_records<'a>(
    corpus: &'a Corpus,
    cfg: &CascadeConfig,
    split: Option<Split>,
) -> Result<Vec<&'a PatchRecord>> {
    let side = cfg.coarse_spec()?.side_px();
    let all: Vec<_> = corpus
        .manifest
        .records
        .iter()
        .filter(|r| (r.scale_um - cfg.sigma_coarse_um).abs() < SCALE_EPS && r.side_px == side)
        .collect();
    if all.is_empty() && !corpus.manifest.records.is_empty() {
        return Err(Error::MissingScale(cfg.sigma_coarse_um));
    }
    Ok(all.into_iter().filter(|r| split.is_none_or(|s| r.split == s)).collect())
}

/// Runs the cascade over `records`, in order.
pub fn infer_records(
    corpus: &Corpus,
    records: &[&PatchRecord],
    models: CascadeModels<'_>,
    cfg: &CascadeConfig,
) -> Result<Vec<CascadeResult>> {
    records
        .par_iter()
        .map(|rec| {
            let img = corpus.image(rec)?;
            let mut result = classify_patch(&img, models, cfg)?;
            result.patch_id = Some(rec.patch_id.clone());
            Ok(result)
        })
        .collect()
}

/// Six-class and collapsed four-type results of a prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n_patches: u64,
    pub six_class: ConfusionMatrix,
    pub six_class_report: ClassReport,
    pub by_type: ConfusionMatrix,
    pub by_type_report: ClassReport,
}

impl Evaluation {
    pub fn from_confusion(six_class: ConfusionMatrix) -> Result<Self> {
        let by_type = collapse_to_type(&six_class)?;
        Ok(Evaluation {
            n_patches: six_class.total(),
            six_class_report: one_vs_rest_report(&six_class)?,
            by_type_report: one_vs_rest_report(&by_type)?,
            six_class,
            by_type,
        })
    }

    pub fn render(&self) -> String {
        use crate::metrics::{render_matrix, render_report};
        format!(
            "patches: {}\n\nsix-class confusion\n{}\n{}\nby type\n{}\n{}",
            self.n_patches,
            render_matrix(&self.six_class),
            render_report(&self.six_class_report),
            render_matrix(&self.by_type),
            render_report(&self.by_type_report),
        )
    }
}

/// Matches predictions to manifest labels and scores them.
pub fn evaluate_predictions(results: &[CascadeResult], manifest: &Manifest) -> Result<Evaluation> {
    let mut truth = Vec::with_capacity(results.len());
    let mut predicted = Vec::with_capacity(results.len());
    for r in results {
        let id = r
            .patch_id
            .as_deref()
            .ok_or_else(|| Error::UnmatchedPatchId("<missing patch_id>".into()))?;
        let rec = manifest
            .get(id)
            .ok_or_else(|| Error::UnmatchedPatchId(id.to_string()))?;
        truth.push(rec.label);
        predicted.push(r.final_label);
    }
    Evaluation::from_confusion(six_class_matrix(&truth, &predicted)?)
}

/// Predictions as JSON Lines.
pub fn write_predictions(results: &[CascadeResult], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<CascadeResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, SynthConfig};

    fn tiny_corpus(dir: &Path) -> Corpus {
        let cfg = SynthConfig {
            n_slides_per_class: 2,
            patches_per_slide: 1,
            canvas_um: 1600.0,
            sigma_fine_um: 400.0,
            ..SynthConfig::default()
        };
        synth_generate(&cfg, dir).unwrap();
        Corpus::open(&dir.join("manifest.csv"), cfg.mpp).unwrap()
    }

    #[test]
    fn samples_follow_scale_and_policy() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        // 1600 um at 4.415 um/px = 362 px; 400 um = 91 px; 3x3 grid... 362/91 = 3.
        let cfg = SampleConfig {
            sigma_um: 400.0,
            policy: InputPolicy::VariableFullRes,
            crops: CropPolicy::All,
            seed: 0,
        };
        let all = prepare_samples(&corpus, Split::Train, &cfg, |_| true).unwrap();
        let n_train = corpus.records(Split::Train).count();
        assert_eq!(all.len(), n_train * 9);
        assert!(all.iter().all(|s| s.image.dimensions() == (91, 91)));

        let some = prepare_samples(
            &corpus,
            Split::Train,
            &SampleConfig {
                crops: CropPolicy::PerParent(2),
                policy: InputPolicy::Fixed224,
                ..cfg.clone()
            },
            |l| l == PolypLabel::Hp,
        )
        .unwrap();
        assert!(some
            .iter()
            .all(|s| s.label == PolypLabel::Hp && s.image.dimensions() == (224, 224)));
        assert_eq!(
            some.len(),
            2 * corpus
                .records(Split::Train)
                .filter(|r| r.label == PolypLabel::Hp)
                .count()
        );

        let coarse = prepare_samples(
            &corpus,
            Split::Test,
            &SampleConfig {
                sigma_um: 1600.0,
                ..cfg.clone()
            },
            |_| true,
        )
        .unwrap();
        assert_eq!(coarse.len(), corpus.records(Split::Test).count());
        assert!(matches!(
            prepare_samples(
                &corpus,
                Split::Test,
                &SampleConfig {
                    sigma_um: 2000.0,
                    ..cfg
                },
                |_| true
            ),
            Err(Error::MissingScale(_))
        ));
    }

    #[test]
    fn predictions_round_trip_and_unknown_ids() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let results: Vec<CascadeResult> = corpus
            .manifest
            .records
            .iter()
            .map(|r| CascadeResult {
                patch_id: Some(r.patch_id.clone()),
                hp_mean_prob: 0.0,
                adenoma_probs: Some([1.0, 0.0, 0.0]),
                hg_ratio: None,
                n_subpatches: 9,
                final_label: PolypLabel::Norm,
                stage_fired: 2,
            })
            .collect();
        let path = dir.path().join("out/pred.jsonl");
        write_predictions(&results, &path).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), results);
        let eval = evaluate_predictions(&results, &corpus.manifest).unwrap();
        assert!((eval.six_class_report.balanced_accuracy - 1.0 / 6.0).abs() < 1e-12);

        let mut bad = results.clone();
        bad[0].patch_id = Some("nope".into());
        assert!(
            matches!(evaluate_predictions(&bad, &corpus.manifest), Err(Error::UnmatchedPatchId(id)) if id == "nope")
        );
    }

    #[test]
    fn sweep_report_rendering() {
        let mut cm = ConfusionMatrix::zeros(PolypLabel::ALL.iter().map(|l| l.to_string()).collect());
        for i in 0..6 {
            cm.counts[i][i] = 3;
        }
        let row = SweepRow::from_confusion(800.0, cm).unwrap();
        assert_eq!(row.six_class_ba, 1.0);
        let report = SweepReport { rows: vec![row] };
        let text = report.render();
        assert!(text.contains("BA (6-class)") && text.contains("TVA"));
        assert_eq!(report.best_scale(|r| r.six_class_ba), Some(800.0));
    }
}
