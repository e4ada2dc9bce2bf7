//! Tiling of labelled source images into a patch corpus.

use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use super::manifest::{patch_id_for, relative_patch_path};
use super::PolypLabel;
use crate::error::{Error, Result};
use crate::scalespace::{crop, read_png, tile_grid, write_png, ScaleSpec};

/// A source image that produced no patches.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractWarning {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractSummary {
    pub n_sources: usize,
    pub n_patches: usize,
    pub warnings: Vec<ExtractWarning>,
}

/// Parent-image origin encoded in a file stem as `_x<X>_y<Y>`, else (0, 0).
fn stem_origin(stem: &str) -> (u32, u32) {
    let parse = || {
        let (head, y) = stem.rsplit_once("_y")?;
        let (_, x) = head.rsplit_once("_x")?;
        Some((x.parse().ok()?, y.parse().ok()?))
    };
    parse().unwrap_or((0, 0))
}

/// Tiles every PNG under `input_dir` into `scale_um` patches below
/// `out_dir`, in the `<label>/<slide_id>/<scale_um>/<patch_id>.png` layout.
///
/// Sources live at `<label>/<slide_id>/.../<name>.png`. Patch ids carry
/// slide-level origins: the tile offset plus any `_x<X>_y<Y>` origin of the
/// source. Sources smaller than one tile produce a warning, not an error.
pub fn extract_patches(input_dir: &Path, out_dir: &Path, scale_um: f64, mpp: f64) -> Result<ExtractSummary> {
    let side = ScaleSpec::new(scale_um, mpp)?.side_px();
    let mut sources = Vec::new();
    for entry in WalkDir::new(input_dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(e.path().unwrap_or(input_dir).to_path_buf(), e.into()))?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            sources.push(entry.into_path());
        }
    }

    let mut summary = ExtractSummary::default();
    let mut written = std::collections::HashSet::new();
    for path in sources {
        let rel = path.strip_prefix(input_dir).expect("walked below input");
        let parts: Vec<&str> = rel.iter().filter_map(|c| c.to_str()).collect();
        if parts.len() < 3 {
            summary.warnings.push(ExtractWarning {
                path: rel.to_path_buf(),
                reason: "expected <label>/<slide_id>/.../<name>.png".into(),
            });
            continue;
        }
        let label: PolypLabel = parts[0].parse()?;
        let slide_id = parts[1];
        let img = read_png(&path)?;
        summary.n_sources += 1;
        let grid = tile_grid(img.width(), img.height(), side)?;
        if grid.is_empty() {
            summary.warnings.push(ExtractWarning {
                path: rel.to_path_buf(),
                reason: format!(
                    "{}x{} image is smaller than one {side} px tile",
                    img.width(),
                    img.height()
                ),
            });
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let (ox, oy) = stem_origin(stem);
        for &(x, y) in &grid.origins {
            let id = patch_id_for(slide_id, scale_um, ox + x, oy + y);
            if !written.insert(id.clone()) {
                return Err(Error::DuplicatePatchId(id));
            }
            let tile = crop(&img, (x, y), side)?;
            write_png(
                &tile,
                &out_dir.join(relative_patch_path(label, slide_id, scale_um, &id)),
            )?;
            summary.n_patches += 1;
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_manifest;
    use image::RgbImage;

    fn source(root: &Path, rel: &str, side: u32) {
        let img = RgbImage::from_fn(side, side, |x, y| image::Rgb([x as u8, y as u8, 7]));
        write_png(&img, &root.join(rel)).unwrap();
    }

    #[test]
    fn tiles_sources_into_the_patch_layout() {
        let input = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        // 7000 um at 44.15 um/px is 159 px; 800 um is 18 px; floor(159/18) = 8.
        source(input.path(), "TA.HG/s1/7000/whole.png", 159);
        source(input.path(), "HP/s2/tiny.png", 10);
        let summary = extract_patches(input.path(), out.path(), 800.0, 44.15).unwrap();
        assert_eq!(summary.n_sources, 2);
        assert_eq!(summary.n_patches, 64);
        assert_eq!(summary.warnings.len(), 1);

        let built = build_manifest(out.path(), 44.15).unwrap();
        assert!(built.skipped.is_empty());
        assert_eq!(built.manifest.records.len(), 64);
        assert!(built
            .manifest
            .records
            .iter()
            .all(|r| r.side_px == 18 && r.label == PolypLabel::TaHg));
    }

    #[test]
    fn whole_source_at_its_own_scale_is_one_patch() {
        let input = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        source(input.path(), "NORM/s1/s1_s7000_x318_y0.png", 159);
        let summary = extract_patches(input.path(), out.path(), 7000.0, 44.15).unwrap();
        assert_eq!(summary.n_patches, 1);
        assert!(out.path().join("NORM/s1/7000/s1_s7000_x318_y0.png").is_file());
    }

    #[test]
    fn bad_label_directory_is_an_error() {
        let input = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        source(input.path(), "XX/s1/a.png", 40);
        assert!(matches!(
            extract_patches(input.path(), out.path(), 800.0, 44.15),
            Err(Error::UnknownLabel(_))
        ));
    }
}
