//! The corpus index.
//!
//! On disk a manifest is a UTF-8 CSV with the header
//! `patch_id,slide_id,split,label,type,grade,scale_um,x_px,y_px,side_px,path`.
//! Patch images live at `<root>/<label>/<slide_id>/<scale_um>/<patch_id>.png`
//! and `path` is relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::label::{Grade, PolypLabel};
use super::split::{split_slides_stratified, Split, DEFAULT_TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::scalespace::ScaleSpec;

pub const MANIFEST_HEADER: [&str; 11] = [
    "patch_id", "slide_id", "split", "label", "type", "grade", "scale_um", "x_px", "y_px", "side_px", "path",
];

/// Seed used when a manifest is rebuilt from a directory tree.
pub const DEFAULT_SPLIT_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub patch_id: String,
    pub slide_id: String,
    pub split: Split,
    pub label: PolypLabel,
    pub scale_um: f64,
    pub x_px: u32,
    pub y_px: u32,
    pub side_px: u32,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub mpp: f64,
    pub records: Vec<PatchRecord>,
}

/// Formats a scale for paths and CSV: `800`, `7000`, `0.5`.
pub fn format_scale(scale_um: f64) -> String {
    format!("{scale_um}")
}

/// Canonical patch identifier for a tile of a slide.
pub fn patch_id_for(slide_id: &str, scale_um: f64, x: u32, y: u32) -> String {
    format!("{slide_id}_s{}_x{x}_y{y}", format_scale(scale_um))
}

/// Relative path of a patch under a corpus root.
pub fn relative_patch_path(label: PolypLabel, slide_id: &str, scale_um: f64, patch_id: &str) -> PathBuf {
    PathBuf::from(label.as_str())
        .join(slide_id)
        .join(format_scale(scale_um))
        .join(format!("{patch_id}.png"))
}

fn parse_origin(patch_id: &str) -> Option<(u32, u32)> {
    let (head, y) = patch_id.rsplit_once("_y")?;
    let (_, x) = head.rsplit_once("_x")?;
    Some((x.parse().ok()?, y.parse().ok()?))
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    patch_id: String,
    slide_id: String,
    split: Split,
    label: PolypLabel,
    #[serde(rename = "type")]
    polyp_type: String,
    grade: String,
    scale_um: String,
    x_px: u32,
    y_px: u32,
    side_px: u32,
    path: String,
}

impl Manifest {
    pub fn new(mpp: f64) -> Self {
        Manifest {
            mpp,
            records: Vec::new(),
        }
    }

    /// Checks id uniqueness, slide consistency, split disjointness and pixel
    /// geometry of every record.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut slides: BTreeMap<&str, (Split, PolypLabel)> = BTreeMap::new();
        for r in &self.records {
            if !ids.insert(r.patch_id.as_str()) {
                return Err(Error::DuplicatePatchId(r.patch_id.clone()));
            }
            let expected = ScaleSpec::new(r.scale_um, self.mpp)?.side_px();
            if r.side_px != expected {
                return Err(Error::invalid(format!(
                    "patch `{}`: side {} px does not match {} µm at {} µm/px (expected {expected}); wrong mpp?",
                    r.patch_id, r.side_px, r.scale_um, self.mpp
                )));
            }
            match slides.get(r.slide_id.as_str()) {
                None => {
                    slides.insert(&r.slide_id, (r.split, r.label));
                }
                Some(&(split, label)) => {
                    if split != r.split {
                        return Err(Error::SplitLeak(r.slide_id.clone()));
                    }
                    if label != r.label {
                        return Err(Error::invalid(format!(
                            "slide `{}` carries both {label} and {}",
                            r.slide_id, r.label
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn slide_labels(&self) -> BTreeMap<String, PolypLabel> {
        self.records.iter().map(|r| (r.slide_id.clone(), r.label)).collect()
    }

    pub fn slides(&self, split: Split) -> BTreeSet<String> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.slide_id.clone())
            .collect()
    }

    pub fn scales(&self) -> BTreeSet<u64> {
        self.records.iter().map(|r| r.scale_um.to_bits()).collect()
    }

    pub fn get(&self, patch_id: &str) -> Option<&PatchRecord> {
        self.records.iter().find(|r| r.patch_id == patch_id)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(file);
        for r in &self.records {
            w.serialize(Row {
                patch_id: r.patch_id.clone(),
                slide_id: r.slide_id.clone(),
                split: r.split,
                label: r.label,
                polyp_type: r.label.polyp_type().as_str().to_string(),
                grade: r.label.grade().map_or("none", Grade::as_str).to_string(),
                scale_um: format_scale(r.scale_um),
                x_px: r.x_px,
                y_px: r.y_px,
                side_px: r.side_px,
                path: r.path.to_string_lossy().replace('\\', "/"),
            })?;
        }
        if self.records.is_empty() {
            w.write_record(MANIFEST_HEADER)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads and validates a manifest written by [`Manifest::write_csv`].
    pub fn read_csv(path: &Path, mpp: f64) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != MANIFEST_HEADER {
            return Err(Error::parse(path, format!("unexpected header {header:?}")));
        }
        let mut records = Vec::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            if row.polyp_type != row.label.polyp_type().as_str()
                || row.grade != row.label.grade().map_or("none", Grade::as_str)
            {
                return Err(Error::parse(
                    path,
                    format!("patch `{}`: type/grade columns disagree with label", row.patch_id),
                ));
            }
            let scale_um: f64 = row
                .scale_um
                .parse()
                .map_err(|_| Error::parse(path, format!("bad scale `{}`", row.scale_um)))?;
            records.push(PatchRecord {
                patch_id: row.patch_id,
                slide_id: row.slide_id,
                split: row.split,
                label: row.label,
                scale_um,
                x_px: row.x_px,
                y_px: row.y_px,
                side_px: row.side_px,
                path: PathBuf::from(row.path),
            });
        }
        let manifest = Manifest { mpp, records };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// A file that was skipped while indexing a directory tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug)]
pub struct ManifestBuild {
    pub manifest: Manifest,
    pub skipped: Vec<Skipped>,
}

fn record_from_path(root: &Path, rel: &Path, mpp: f64) -> std::result::Result<PatchRecord, String> {
    let parts: Vec<&str> = rel.iter().filter_map(|c| c.to_str()).collect();
    let [label, slide_id, scale, file] = parts.as_slice() else {
        return Err("expected <label>/<slide_id>/<scale_um>/<patch_id>.png".into());
    };
    let label: PolypLabel = label.parse().map_err(|e: Error| e.to_string())?;
    let scale_um: f64 = scale
        .parse()
        .map_err(|_| format!("scale directory `{scale}` is not a number"))?;
    let spec = ScaleSpec::new(scale_um, mpp).map_err(|e| e.to_string())?;
    let patch_id = file.strip_suffix(".png").ok_or_else(|| "not a .png file".to_string())?;
    let (x_px, y_px) =
        parse_origin(patch_id).ok_or_else(|| format!("patch id `{patch_id}` lacks an _x<X>_y<Y> origin suffix"))?;
    let (w, h) = image::image_dimensions(root.join(rel)).map_err(|e| e.to_string())?;
    if (w, h) != (spec.side_px(), spec.side_px()) {
        return Err(format!(
            "image is {w}x{h}, expected {0}x{0} for {scale_um} µm",
            spec.side_px()
        ));
    }
    Ok(PatchRecord {
        patch_id: patch_id.to_string(),
        slide_id: slide_id.to_string(),
        split: Split::Train,
        label,
        scale_um,
        x_px,
        y_px,
        side_px: spec.side_px(),
        path: rel.to_path_buf(),
    })
}

/// Indexes every PNG below `root` with the default stratified split.
pub fn build_manifest(root: &Path, mpp: f64) -> Result<ManifestBuild> {
    build_manifest_with(root, mpp, DEFAULT_TRAIN_FRACTION, DEFAULT_SPLIT_SEED)
}

/// Indexes every PNG below `root`. Files that do not follow the layout are
/// reported in `skipped`; a duplicate patch id is fatal.
pub fn build_manifest_with(root: &Path, mpp: f64, train_fraction: f64, seed: u64) -> Result<ManifestBuild> {
    ScaleSpec::new(1.0e6, mpp)?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut entries: Vec<PathBuf> = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(path, e.into())
        })?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            entries.push(entry.into_path());
        }
    }
    for path in entries {
        let rel = path.strip_prefix(root).expect("walked below root").to_path_buf();
        match record_from_path(root, &rel, mpp) {
            Ok(r) => records.push(r),
            Err(reason) => skipped.push(Skipped { path: rel, reason }),
        }
    }

    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.patch_id.clone()) {
            return Err(Error::DuplicatePatchId(r.patch_id.clone()));
        }
    }

    let mut manifest = Manifest { mpp, records };
    if !manifest.records.is_empty() {
        let labels = manifest.slide_labels();
        let split = split_slides_stratified(&labels, train_fraction, seed)?;
        for r in &mut manifest.records {
            r.split = split.split_of(&r.slide_id).expect("every slide is assigned");
        }
    }
    manifest.validate()?;
    Ok(ManifestBuild { manifest, skipped })
}
