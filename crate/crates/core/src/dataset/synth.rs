//! Deterministic scale-aware synthetic corpus.
//!
//! Every generated parent patch covers `canvas_um` of tissue and carries
//! three independent cues, each readable at one scale only:
//!
//! * HP serration: a one-pixel checkerboard over the whole field, present
//!   iff the class is HP. Visible in fine crops, averaged away when the
//!   whole field is shrunk to network input size.
//! * Gland crowding: large overlapping dark discs whose area fraction
//!   separates NORM/HP (low), TA (medium) and TVA (high). A fine crop sits
//!   almost entirely inside or outside one gland, so the fraction is only
//!   measurable over the coarse field.
//! * Nuclei: 4×2 footprints (bright, dark, dark, bright) placed per fine
//!   grid cell, with a per-cell count drawn from the HG band for high-grade
//!   adenomas and from the LG band otherwise. They are two pixels wide and
//!   mean-neutral, so any strong downsampling removes them.
//!
//! Each parent draws from its own RNG stream derived from
//! `(seed, class, slide, patch)`, so serial and parallel runs agree byte for
//! byte.

use std::path::Path;

use image::RgbImage;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::cues;
use super::label::{Grade, PolypLabel, PolypType};
use super::manifest::{patch_id_for, relative_patch_path, Manifest, PatchRecord};
use super::split::split_slides_stratified;
use crate::config::{parse_band, parse_value, KvConfig};
use crate::error::{Error, Result};
use crate::scalespace::{write_png, ScaleSpec};

/// Stroma background colour.
pub const BACKGROUND_RGB: [u8; 3] = [185, 130, 170];
/// Gland colour.
pub const GLAND_RGB: [u8; 3] = [110, 70, 140];

/// Nucleus slot grid inside a fine cell.
const SLOT_W: u32 = 8;
const SLOT_H: u32 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_slides_per_class: usize,
    pub patches_per_slide: usize,
    pub seed: u64,
    pub canvas_um: f64,
    pub mpp: f64,
    pub sigma_fine_um: f64,
    pub train_fraction: f64,
    /// Half-width of each of the two uniform terms of the triangular noise.
    pub noise_amp: u8,
    pub hp_texture_amp: u8,
    pub nucleus_contrast: u8,
    pub lg_nuclei: (f64, f64),
    pub hg_nuclei: (f64, f64),
    pub gland_low: (f64, f64),
    pub gland_ta: (f64, f64),
    pub gland_tva: (f64, f64),
    /// Gland radius range as a fraction of the canvas side.
    pub gland_radius: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_slides_per_class: 10,
            patches_per_slide: 2,
            seed: 0,
            canvas_um: 7000.0,
            mpp: 4.415,
            sigma_fine_um: 800.0,
            train_fraction: 0.7,
            noise_amp: 6,
            hp_texture_amp: 16,
            nucleus_contrast: 50,
            lg_nuclei: (4.0, 12.0),
            hg_nuclei: (40.0, 60.0),
            gland_low: (0.06, 0.10),
            gland_ta: (0.25, 0.30),
            gland_tva: (0.45, 0.50),
            gland_radius: (0.06, 0.10),
        }
    }
}

impl KvConfig for SynthConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "n_slides_per_class" => self.n_slides_per_class = parse_value(key, value)?,
            "patches_per_slide" => self.patches_per_slide = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "canvas_um" => self.canvas_um = parse_value(key, value)?,
            "mpp" => self.mpp = parse_value(key, value)?,
            "sigma_fine_um" => self.sigma_fine_um = parse_value(key, value)?,
            "train_fraction" => self.train_fraction = parse_value(key, value)?,
            "noise_amp" => self.noise_amp = parse_value(key, value)?,
            "hp_texture_amp" => self.hp_texture_amp = parse_value(key, value)?,
            "nucleus_contrast" => self.nucleus_contrast = parse_value(key, value)?,
            "lg_nuclei" => self.lg_nuclei = parse_band(key, value)?,
            "hg_nuclei" => self.hg_nuclei = parse_band(key, value)?,
            "gland_low" => self.gland_low = parse_band(key, value)?,
            "gland_ta" => self.gland_ta = parse_band(key, value)?,
            "gland_tva" => self.gland_tva = parse_band(key, value)?,
            "gland_radius" => self.gland_radius = parse_band(key, value)?,
            _ => return Err(format!("unknown synth key `{key}`")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let band = |b: (f64, f64)| format!("{},{}", b.0, b.1);
        vec![
            ("n_slides_per_class", self.n_slides_per_class.to_string()),
            ("patches_per_slide", self.patches_per_slide.to_string()),
            ("seed", self.seed.to_string()),
            ("canvas_um", self.canvas_um.to_string()),
            ("mpp", self.mpp.to_string()),
            ("sigma_fine_um", self.sigma_fine_um.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("noise_amp", self.noise_amp.to_string()),
            ("hp_texture_amp", self.hp_texture_amp.to_string()),
            ("nucleus_contrast", self.nucleus_contrast.to_string()),
            ("lg_nuclei", band(self.lg_nuclei)),
            ("hg_nuclei", band(self.hg_nuclei)),
            ("gland_low", band(self.gland_low)),
            ("gland_ta", band(self.gland_ta)),
            ("gland_tva", band(self.gland_tva)),
            ("gland_radius", band(self.gland_radius)),
        ]
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.n_slides_per_class == 0 || self.patches_per_slide == 0 {
            return Err("n_slides_per_class and patches_per_slide must be positive".into());
        }
        if !(self.sigma_fine_um < self.canvas_um) {
            return Err("sigma_fine_um must be smaller than canvas_um".into());
        }
        if self.lg_nuclei.1 >= self.hg_nuclei.0 {
            return Err("lg_nuclei and hg_nuclei bands must not overlap".into());
        }
        if self.gland_low.1 >= self.gland_ta.0 || self.gland_ta.1 >= self.gland_tva.0 {
            return Err("gland fraction bands must be increasing and disjoint".into());
        }
        if self.gland_tva.1 >= 1.0 || self.gland_low.0 < 0.0 {
            return Err("gland fractions must lie in [0, 1)".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err("train_fraction must lie in (0, 1)".into());
        }
        self.canvas_spec().map_err(|e| e.to_string())?;
        self.fine_spec().map_err(|e| e.to_string())?;
        Ok(())
    }
}

impl SynthConfig {
    pub fn canvas_spec(&self) -> Result<ScaleSpec> {
        ScaleSpec::new(self.canvas_um, self.mpp)
    }

    pub fn fine_spec(&self) -> Result<ScaleSpec> {
        ScaleSpec::new(self.sigma_fine_um, self.mpp)
    }

    pub fn gland_band(&self, t: PolypType) -> (f64, f64) {
        match t {
            PolypType::Hp | PolypType::Norm => self.gland_low,
            PolypType::Ta => self.gland_ta,
            PolypType::Tva => self.gland_tva,
        }
    }

    pub fn nuclei_band(&self, label: PolypLabel) -> (f64, f64) {
        match label.grade() {
            Some(Grade::High) => self.hg_nuclei,
            _ => self.lg_nuclei,
        }
    }

    /// Gray level halfway between gland and stroma.
    pub fn gland_gray_threshold(&self) -> f32 {
        let g = |c: [u8; 3]| c.iter().map(|&v| v as f32).sum::<f32>() / 3.0;
        (g(BACKGROUND_RGB) + g(GLAND_RGB)) / 2.0
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// Rasterizes overlapping discs until the covered fraction reaches `target`.
fn gland_mask(n: u32, target: f64, radius: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<bool> {
    let side = n as usize;
    let mut mask = vec![false; side * side];
    let goal = (target * (side * side) as f64).ceil() as usize;
    let mut covered = 0usize;
    let (rmin, rmax) = (radius.0 * n as f64, radius.1 * n as f64);
    while covered < goal {
        let r = if rmax > rmin {
            rng.random_range(rmin..rmax)
        } else {
            rmin
        };
        let cx = rng.random_range(0.0..n as f64);
        let cy = rng.random_range(0.0..n as f64);
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(side - 1);
        for y in y0..=y1 {
            let dy = y as f64 + 0.5 - cy;
            let half = r * r - dy * dy;
            if half <= 0.0 {
                continue;
            }
            let half = half.sqrt();
            let x0 = (cx - half).round().max(0.0) as usize;
            let x1 = ((cx + half).round() as usize).min(side);
            for m in &mut mask[y * side + x0..y * side + x1] {
                if !*m {
                    *m = true;
                    covered += 1;
                }
            }
        }
    }
    mask
}

/// Adds nucleus footprints cell by cell over the fine grid; returns the
/// per-pixel intensity offsets.
fn nucleus_offsets(n: u32, fine: u32, band: (f64, f64), contrast: i16, rng: &mut ChaCha8Rng) -> Vec<i16> {
    let side = n as usize;
    let mut off = vec![0i16; side * side];
    for cy in (0..n).step_by(fine as usize) {
        for cx in (0..n).step_by(fine as usize) {
            let (w, h) = (fine.min(n - cx), fine.min(n - cy));
            if w < SLOT_W || h < SLOT_H {
                continue;
            }
            let (sx, sy) = ((w - SLOT_W) / SLOT_W + 1, (h - SLOT_H) / SLOT_H + 1);
            let slots = (sx * sy) as usize;
            let area = (w * h) as f64 / (fine * fine) as f64;
            let drawn = if band.1 > band.0 {
                rng.random_range(band.0..=band.1)
            } else {
                band.0
            };
            let k = ((drawn * area).round() as usize).min(slots);
            for slot in sample(rng, slots, k).into_vec() {
                let (col, row) = (slot as u32 % sx, slot as u32 / sx);
                let x = cx + 1 + col * SLOT_W + rng.random_range(0..=2);
                let y = cy + 1 + row * SLOT_H + rng.random_range(0..=2);
                for dy in 0..2 {
                    let base = (y + dy) as usize * side + x as usize;
                    off[base] += contrast;
                    off[base + 1] -= contrast;
                    off[base + 2] -= contrast;
                    off[base + 3] += contrast;
                }
            }
        }
    }
    off
}

/// Renders one parent patch of class `label` from the given stream seed.
pub fn render_parent(cfg: &SynthConfig, label: PolypLabel, stream: u64) -> Result<RgbImage> {
    let n = cfg.canvas_spec()?.side_px();
    let fine = cfg.fine_spec()?.side_px();
    let mut rng = ChaCha8Rng::seed_from_u64(stream);

    let band = cfg.gland_band(label.polyp_type());
    let target = if band.1 > band.0 {
        rng.random_range(band.0..band.1)
    } else {
        band.0
    };
    let mask = gland_mask(n, target, cfg.gland_radius, &mut rng);
    let nuclei = nucleus_offsets(n, fine, cfg.nuclei_band(label), cfg.nucleus_contrast as i16, &mut rng);
    let texture = if label == PolypLabel::Hp {
        cfg.hp_texture_amp as i16
    } else {
        0
    };
    let amp = cfg.noise_amp as i16;

    let side = n as usize;
    let mut buf = vec![0u8; side * side * 3];
    for (i, px) in buf.chunks_exact_mut(3).enumerate() {
        let (x, y) = (i % side, i / side);
        let base = if mask[i] { GLAND_RGB } else { BACKGROUND_RGB };
        let checker = if (x + y) % 2 == 0 { texture } else { -texture };
        let shift = checker + nuclei[i];
        for c in 0..3 {
            let noise = if amp > 0 {
                rng.random_range(-amp..=amp) + rng.random_range(-amp..=amp)
            } else {
                0
            };
            px[c] = (base[c] as i16 + shift + noise).clamp(0, 255) as u8;
        }
    }
    Ok(RgbImage::from_raw(n, n, buf).expect("buffer sized to canvas"))
}

/// One parent patch to be generated.
#[derive(Debug, Clone)]
pub struct ParentPlan {
    pub label: PolypLabel,
    pub slide_id: String,
    pub patch_id: String,
    pub x_px: u32,
    pub stream: u64,
}

/// Enumerates every parent of the corpus in class, slide, patch order.
pub fn plan(cfg: &SynthConfig) -> Result<Vec<ParentPlan>> {
    let n = cfg.canvas_spec()?.side_px();
    let mut out = Vec::new();
    for (c, label) in PolypLabel::ALL.into_iter().enumerate() {
        for s in 0..cfg.n_slides_per_class {
            let slide_id = format!("{}-{s:03}", label.slug());
            for k in 0..cfg.patches_per_slide {
                let x_px = k as u32 * n;
                out.push(ParentPlan {
                    label,
                    patch_id: patch_id_for(&slide_id, cfg.canvas_um, x_px, 0),
                    slide_id: slide_id.clone(),
                    x_px,
                    stream: stream_seed(cfg.seed, &[c as u64, s as u64, k as u64]),
                });
            }
        }
    }
    Ok(out)
}

/// Writes the corpus under `out_dir` plus `manifest.csv`, and returns the
/// manifest.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate().map_err(Error::InvalidArgument)?;
    let canvas = cfg.canvas_spec()?;
    let parents = plan(cfg)?;

    let labels = parents.iter().map(|p| (p.slide_id.clone(), p.label)).collect();
    let split = split_slides_stratified(&labels, cfg.train_fraction, cfg.seed)?;

    let records = parents
        .par_iter()
        .map(|p| {
            let img = render_parent(cfg, p.label, p.stream)?;
            let rel = relative_patch_path(p.label, &p.slide_id, cfg.canvas_um, &p.patch_id);
            write_png(&img, &out_dir.join(&rel))?;
            Ok(PatchRecord {
                patch_id: p.patch_id.clone(),
                slide_id: p.slide_id.clone(),
                split: split.split_of(&p.slide_id).expect("all slides split"),
                label: p.label,
                scale_um: cfg.canvas_um,
                x_px: p.x_px,
                y_px: 0,
                side_px: canvas.side_px(),
                path: rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest { mpp: cfg.mpp, records };
    manifest.validate()?;
    manifest.write_csv(&out_dir.join("manifest.csv"))?;
    std::fs::write(out_dir.join("synth.cfg"), cfg.to_kv_string()).map_err(|e| Error::io(out_dir, e))?;
    Ok(manifest)
}

/// Cue readings of a fine crop at working resolution.
#[derive(Debug, Clone, Copy)]
pub struct FineCueReading {
    pub detail_energy: f64,
    pub nuclei: usize,
}

pub fn read_fine_cues(cfg: &SynthConfig, crop: &RgbImage) -> FineCueReading {
    FineCueReading {
        detail_energy: cues::detail_energy(crop),
        nuclei: cues::nucleus_count(crop, cfg.nucleus_contrast as f32),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::apply_kv;

    fn small() -> SynthConfig {
        SynthConfig {
            n_slides_per_class: 1,
            patches_per_slide: 1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_canvas_geometry() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.canvas_spec().unwrap().side_px(), 1586);
        assert_eq!(cfg.fine_spec().unwrap().side_px(), 181);
    }

    #[test]
    fn config_file_round_trip() {
        let mut cfg = SynthConfig::default();
        apply_kv(&mut cfg, "n_slides_per_class = 2\nseed = 9\nhg_nuclei = 30, 50\n").unwrap();
        assert_eq!((cfg.n_slides_per_class, cfg.seed, cfg.hg_nuclei), (2, 9, (30.0, 50.0)));
        let mut again = SynthConfig::default();
        apply_kv(&mut again, &cfg.to_kv_string()).unwrap();
        assert_eq!(again, cfg);
        assert!(apply_kv(&mut again, "bogus = 1\n").is_err());
        assert!(apply_kv(&mut again, "lg_nuclei = 1,50\n").is_err());
    }

    #[test]
    fn stream_seeds_are_distinct() {
        let seeds: std::collections::BTreeSet<u64> = plan(&SynthConfig::default())
            .unwrap()
            .iter()
            .map(|p| p.stream)
            .collect();
        assert_eq!(seeds.len(), 120);
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = small();
        let a = render_parent(&cfg, PolypLabel::TvaHg, 42).unwrap();
        let b = render_parent(&cfg, PolypLabel::TvaHg, 42).unwrap();
        assert!(a == b);
        let c = render_parent(&cfg, PolypLabel::TvaHg, 43).unwrap();
        assert!(a != c);
    }

    #[test]
    fn gland_mask_reaches_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = gland_mask(400, 0.3, (0.06, 0.1), &mut rng);
        let frac = mask.iter().filter(|&&m| m).count() as f64 / (400.0 * 400.0);
        assert!((0.3..0.34).contains(&frac), "{frac}");
    }
}
