//! Physical-scale patch geometry.
//!
//! A patch scale is a physical side length in µm. Together with the scanner
//! resolution (µm per pixel) it fixes the pixel side of a square patch. This
//! module converts between the two, lays out non-overlapping tile grids and
//! crops/resamples 8-bit RGB images.

use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scanner resolution of the reference whole-slide scanner (20× magnification).
pub const SCANNER_MPP: f64 = 0.4415;

/// Network input side for downsampled classifiers.
pub const NETWORK_INPUT_SIDE: u32 = 224;

/// A physical patch scale bound to a scanner resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec {
    sigma_um: f64,
    mpp: f64,
}

impl ScaleSpec {
    pub fn new(sigma_um: f64, mpp: f64) -> Result<Self> {
        if !(sigma_um.is_finite() && sigma_um > 0.0) {
            return Err(Error::invalid(format!(
                "scale must be a positive number of µm, got {sigma_um}"
            )));
        }
        if !(mpp.is_finite() && mpp > 0.0) {
            return Err(Error::invalid(format!(
                "resolution must be a positive number of µm/px, got {mpp}"
            )));
        }
        let spec = ScaleSpec { sigma_um, mpp };
        if spec.side_px_unchecked() < 1 {
            return Err(Error::invalid(format!(
                "scale {sigma_um} µm is below one pixel at {mpp} µm/px"
            )));
        }
        Ok(spec)
    }

    pub fn sigma_um(&self) -> f64 {
        self.sigma_um
    }

    pub fn mpp(&self) -> f64 {
        self.mpp
    }

    /// Pixel side length, rounded to nearest with halves rounded up.
    pub fn side_px(&self) -> u32 {
        self.side_px_unchecked()
    }

    fn side_px_unchecked(&self) -> u32 {
        (self.sigma_um / self.mpp + 0.5).floor() as u32
    }
}

/// Pixel side of a patch of physical side `sigma_um` at `mpp` µm/px.
pub fn scale_to_pixels(sigma_um: f64, mpp: f64) -> Result<u32> {
    Ok(ScaleSpec::new(sigma_um, mpp)?.side_px())
}

/// Regular non-overlapping tiling of a parent image, anchored at (0, 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub parent_width_px: u32,
    pub parent_height_px: u32,
    pub tile_side_px: u32,
    /// Tile origins in row-major order.
    pub origins: Vec<(u32, u32)>,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn cols(&self) -> u32 {
        self.parent_width_px / self.tile_side_px
    }

    pub fn rows(&self) -> u32 {
        self.parent_height_px / self.tile_side_px
    }
}

/// Lays out a stride = side grid over a `width_px × height_px` parent.
///
/// Remainder pixels on the right and bottom are discarded. A tile larger
/// than the parent yields an empty grid.
pub fn tile_grid(width_px: u32, height_px: u32, tile_side_px: u32) -> Result<TileGrid> {
    if width_px == 0 || height_px == 0 || tile_side_px == 0 {
        return Err(Error::invalid(format!(
            "tile grid needs positive sizes, got {width_px}x{height_px} with side {tile_side_px}"
        )));
    }
    let cols = width_px / tile_side_px;
    let rows = height_px / tile_side_px;
    let origins = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (c * tile_side_px, r * tile_side_px)))
        .collect();
    Ok(TileGrid {
        parent_width_px: width_px,
        parent_height_px: height_px,
        tile_side_px,
        origins,
    })
}

/// Copies the `side_px × side_px` window at `origin` out of `parent`.
pub fn crop(parent: &RgbImage, origin: (u32, u32), side_px: u32) -> Result<RgbImage> {
    let (x, y) = origin;
    if side_px == 0 {
        return Err(Error::invalid("crop side must be positive"));
    }
    let fits = |o: u32, extent: u32| o.checked_add(side_px).is_some_and(|end| end <= extent);
    if !fits(x, parent.width()) || !fits(y, parent.height()) {
        return Err(Error::invalid(format!(
            "crop window ({x}, {y}) side {side_px} exceeds {}x{} parent",
            parent.width(),
            parent.height()
        )));
    }
    let src = parent.as_raw();
    let stride = parent.width() as usize * 3;
    let row_len = side_px as usize * 3;
    let mut out = Vec::with_capacity(row_len * side_px as usize);
    for row in y..y + side_px {
        let start = row as usize * stride + x as usize * 3;
        out.extend_from_slice(&src[start..start + row_len]);
    }
    Ok(RgbImage::from_raw(side_px, side_px, out).expect("buffer sized to crop"))
}

/// Area-averaging resample of a square image to `target_side_px²`.
pub fn downsample(img: &RgbImage, target_side_px: u32) -> Result<RgbImage> {
    if img.width() != img.height() {
        return Err(Error::invalid(format!(
            "downsample expects a square image, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    if target_side_px == 0 {
        return Err(Error::invalid("target side must be positive"));
    }
    Ok(resample_area(img, target_side_px, target_side_px))
}

/// Crops every tile of a `sigma_um` grid laid over `parent` and resamples each
/// to `NETWORK_INPUT_SIDE` when `to_network_input` is set.
pub fn sub_patches(parent: &RgbImage, spec: ScaleSpec, to_network_input: bool) -> Result<Vec<RgbImage>> {
    let grid = tile_grid(parent.width(), parent.height(), spec.side_px())?;
    grid.origins
        .iter()
        .map(|&o| {
            let tile = crop(parent, o, grid.tile_side_px)?;
            if to_network_input {
                downsample(&tile, NETWORK_INPUT_SIDE)
            } else {
                Ok(tile)
            }
        })
        .collect()
}

/// Source-pixel coverage weights of each output pixel along one axis.
///
/// In units where one source pixel has length `dst` and one output pixel has
/// length `src`, weights are exact integers summing to `src` per output pixel.
fn axis_weights(src: u32, dst: u32) -> Vec<Vec<(usize, u64)>> {
    let (src, dst) = (src as u64, dst as u64);
    (0..dst)
        .map(|j| {
            let lo = j * src;
            let hi = (j + 1) * src;
            let first = lo / dst;
            let last = (hi - 1) / dst;
            (first..=last)
                .filter_map(|i| {
                    let overlap = hi.min((i + 1) * dst) - lo.max(i * dst);
                    (overlap > 0).then_some((i as usize, overlap))
                })
                .collect()
        })
        .collect()
}

/// Exact integer area averaging; works in both directions and is the
/// identity when sizes match. Rounds halves up.
pub fn resample_area(img: &RgbImage, out_w: u32, out_h: u32) -> RgbImage {
    let (in_w, in_h) = img.dimensions();
    if (in_w, in_h) == (out_w, out_h) {
        return img.clone();
    }
    let wx = axis_weights(in_w, out_w);
    let wy = axis_weights(in_h, out_h);
    let src = img.as_raw();
    let in_stride = in_w as usize * 3;

    // Horizontal pass: each entry carries an implicit denominator of in_w.
    let mut rows = vec![0u64; in_h as usize * out_w as usize * 3];
    for y in 0..in_h as usize {
        let line = &src[y * in_stride..(y + 1) * in_stride];
        let dst = &mut rows[y * out_w as usize * 3..(y + 1) * out_w as usize * 3];
        for (j, taps) in wx.iter().enumerate() {
            let mut acc = [0u64; 3];
            for &(i, w) in taps {
                for c in 0..3 {
                    acc[c] += w * line[i * 3 + c] as u64;
                }
            }
            dst[j * 3..j * 3 + 3].copy_from_slice(&acc);
        }
    }

    let den = in_w as u64 * in_h as u64;
    let row_len = out_w as usize * 3;
    let mut out = vec![0u8; out_h as usize * row_len];
    let mut acc = vec![0u64; row_len];
    for (j, taps) in wy.iter().enumerate() {
        acc.iter_mut().for_each(|a| *a = 0);
        for &(i, w) in taps {
            let row = &rows[i * row_len..(i + 1) * row_len];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += w * v;
            }
        }
        for (o, &a) in out[j * row_len..(j + 1) * row_len].iter_mut().zip(&acc) {
            *o = ((2 * a + den) / (2 * den)) as u8;
        }
    }
    RgbImage::from_raw(out_w, out_h, out).expect("buffer sized to output")
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.into_rgb8())
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn brute_force_origins(w: u32, h: u32, s: u32) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if x % s == 0 && y % s == 0 && x + s <= w && y + s <= h {
                    out.push((x, y));
                }
            }
        }
        out
    }

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 10 + y) as u8, (y * 10) as u8, 7]))
    }

    #[test]
    fn published_patch_sides() {
        assert_eq!(scale_to_pixels(800.0, SCANNER_MPP).unwrap(), 1812);
        assert_eq!(scale_to_pixels(7000.0, SCANNER_MPP).unwrap(), 15855);
        assert_eq!(scale_to_pixels(0.4415, 0.4415).unwrap(), 1);
    }

    #[test]
    fn rounding_ties_go_up() {
        assert_eq!(scale_to_pixels(2.5, 1.0).unwrap(), 3);
        assert_eq!(scale_to_pixels(2.4999, 1.0).unwrap(), 2);
    }

    #[test]
    fn non_positive_scale_rejected() {
        assert!(matches!(scale_to_pixels(0.0, 0.4415), Err(Error::InvalidArgument(_))));
        assert!(scale_to_pixels(800.0, -1.0).is_err());
        assert!(scale_to_pixels(f64::NAN, 1.0).is_err());
        assert!(scale_to_pixels(0.1, 1.0).is_err());
    }

    #[test]
    fn coarse_parent_holds_64_fine_tiles() {
        let grid = tile_grid(15855, 15855, 1812).unwrap();
        assert_eq!(grid.len(), 64);
        assert_eq!((grid.cols(), grid.rows()), (8, 8));
        assert_eq!(grid.origins, brute_force_origins(15855, 15855, 1812));
        assert_eq!(*grid.origins.last().unwrap(), (12684, 12684));
    }

    #[test]
    fn tile_grid_small_cases() {
        assert_eq!(tile_grid(1812, 1812, 1812).unwrap().origins, vec![(0, 0)]);
        assert_eq!(
            tile_grid(1000, 2000, 600).unwrap().origins,
            vec![(0, 0), (0, 600), (0, 1200)]
        );
        assert!(tile_grid(100, 100, 101).unwrap().is_empty());
        assert!(tile_grid(0, 100, 10).is_err());
    }

    #[test]
    fn crop_matches_direct_indexing() {
        let img = gradient(4, 4);
        let sub = crop(&img, (1, 1), 2).unwrap();
        for j in 0..2 {
            for i in 0..2 {
                assert_eq!(sub.get_pixel(i, j), img.get_pixel(1 + i, 1 + j));
            }
        }
        assert_eq!(crop(&img, (0, 0), 4).unwrap(), img);
    }

    #[test]
    fn crop_bounds() {
        let img = RgbImage::new(40, 40);
        assert!(crop(&img, (36, 0), 4).is_ok());
        assert!(crop(&img, (37, 0), 4).is_err());
        assert!(crop(&img, (0, u32::MAX), 4).is_err());
        // 8 * 1812 = 14496 overruns a 15855 parent; 7 * 1812 = 12684 is the last origin.
        let g = tile_grid(15855, 15855, 1812).unwrap();
        assert!(g.origins.iter().all(|&(x, _)| x + 1812 <= 15855));
        assert_eq!(g.origins.iter().map(|o| o.0).max(), Some(12684));
    }

    #[test]
    fn downsample_checkerboard_averages() {
        let img = RgbImage::from_fn(2, 2, |x, y| {
            let v = if (x + y) % 2 == 0 { 0 } else { 255 };
            Rgb([v, v, v])
        });
        let out = downsample(&img, 1).unwrap();
        let v = out.get_pixel(0, 0)[0];
        assert!(v == 127 || v == 128);
    }

    #[test]
    fn downsample_to_network_input() {
        let img = RgbImage::from_pixel(1812, 1812, Rgb([200, 10, 99]));
        let out = downsample(&img, NETWORK_INPUT_SIDE).unwrap();
        assert_eq!(out.dimensions(), (224, 224));
        assert!(out.pixels().all(|p| *p == Rgb([200, 10, 99])));
    }

    #[test]
    fn downsample_rejects_non_square() {
        assert!(downsample(&RgbImage::new(3, 4), 2).is_err());
    }

    #[test]
    fn area_average_matches_brute_force() {
        // Supersampling oracle: replicate each source pixel dst times per axis,
        // then average src×src blocks.
        let img = RgbImage::from_fn(7, 7, |x, y| Rgb([(x * 37 + y * 11) as u8, (x * y) as u8, 3]));
        for dst in [1u32, 2, 3, 5, 9, 11] {
            let out = resample_area(&img, dst, dst);
            for j in 0..dst {
                for i in 0..dst {
                    for c in 0..3 {
                        let mut sum = 0u64;
                        for sy in j * 7..(j + 1) * 7 {
                            for sx in i * 7..(i + 1) * 7 {
                                sum += img.get_pixel(sx / dst, sy / dst)[c] as u64;
                            }
                        }
                        let expected = ((2 * sum + 49) / 98) as u8;
                        assert_eq!(out.get_pixel(i, j)[c], expected, "dst {dst} ({i},{j})");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn side_error_within_half_pixel(sigma in 1.0f64..10_000.0, mpp in 0.05f64..5.0) {
            prop_assume!(sigma / mpp >= 1.0);
            let spec = ScaleSpec::new(sigma, mpp).unwrap();
            let err = (spec.side_px() as f64 * mpp - sigma).abs();
            prop_assert!(err <= mpp / 2.0 + 1e-9);
        }

        #[test]
        fn grid_matches_enumeration(w in 1u32..300, h in 1u32..300, s in 1u32..120) {
            let grid = tile_grid(w, h, s).unwrap();
            prop_assert_eq!(&grid.origins, &brute_force_origins(w, h, s));
            prop_assert_eq!(grid.len() as u32, (w / s) * (h / s));
        }

        #[test]
        fn tiles_are_disjoint(w in 1u32..120, h in 1u32..120, s in 1u32..40) {
            let grid = tile_grid(w, h, s).unwrap();
            let mut cover = vec![0u8; (w * h) as usize];
            for &(x, y) in &grid.origins {
                for yy in y..y + s {
                    for xx in x..x + s {
                        cover[(yy * w + xx) as usize] += 1;
                    }
                }
            }
            prop_assert!(cover.iter().all(|&c| c <= 1));
        }

        #[test]
        fn tiles_reassemble_parent(cols in 1u32..5, rows in 1u32..5, s in 1u32..9, seed in any::<u8>()) {
            let (w, h) = (cols * s, rows * s);
            let parent = RgbImage::from_fn(w, h, |x, y| {
                Rgb([(x as u8).wrapping_mul(seed), y as u8, (x ^ y) as u8])
            });
            let grid = tile_grid(w, h, s).unwrap();
            let mut rebuilt = RgbImage::new(w, h);
            for &o in &grid.origins {
                let tile = crop(&parent, o, s).unwrap();
                image::imageops::replace(&mut rebuilt, &tile, o.0 as i64, o.1 as i64);
            }
            prop_assert_eq!(rebuilt, parent);
        }

        #[test]
        fn constants_survive_resampling(side in 1u32..64, target in 1u32..64, v in any::<[u8; 3]>()) {
            let img = RgbImage::from_pixel(side, side, Rgb(v));
            let out = downsample(&img, target).unwrap();
            prop_assert!(out.pixels().all(|p| *p == Rgb(v)));
        }

        #[test]
        fn equal_size_resample_is_identity(side in 1u32..40, seed in any::<u32>()) {
            let img = RgbImage::from_fn(side, side, |x, y| {
                let h = (x.wrapping_mul(2654435761) ^ y.wrapping_mul(40503) ^ seed) as u8;
                Rgb([h, h.wrapping_add(1), h.wrapping_mul(3)])
            });
            prop_assert_eq!(downsample(&img, side).unwrap(), img);
        }
    }
}
