//! Closed-form statistics of the three synthetic tissue cues.
//!
//! * `detail_energy`: mean absolute mixed second difference of the gray
//!   image. The hyperplastic serration texture is a one-pixel checkerboard,
//!   which this statistic picks up strongly; area averaging over a wide
//!   field cancels it.
//! * `gland_fraction`: share of pixels darker than the gland/stroma midpoint,
//!   i.e. gland crowding. Only meaningful over a whole coarse field.
//! * `nucleus_count`: number of 4×2 nucleus footprints (bright, dark, dark,
//!   bright columns). Their mean equals the background, so downsampling
//!   erases them without shifting the average intensity.

use image::RgbImage;

pub fn gray(img: &RgbImage) -> Vec<f32> {
    img.pixels()
        .map(|p| (p[0] as f32 + p[1] as f32 + p[2] as f32) / 3.0)
        .collect()
}

pub fn detail_energy(img: &RgbImage) -> f64 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < 2 || h < 2 {
        return 0.0;
    }
    let g = gray(img);
    let mut sum = 0.0f64;
    for y in 0..h - 1 {
        let (r0, r1) = (&g[y * w..(y + 1) * w], &g[(y + 1) * w..(y + 2) * w]);
        let mut row = 0.0f32;
        for x in 0..w - 1 {
            row += (r0[x] - r0[x + 1] - r1[x] + r1[x + 1]).abs();
        }
        sum += row as f64;
    }
    sum / ((w - 1) * (h - 1)) as f64
}

/// Median absolute mixed second difference: the pixel noise level, robust
/// to the sparse gland edges that dominate the mean over a coarse field.
pub fn noise_floor(img: &RgbImage) -> f64 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < 2 || h < 2 {
        return 0.0;
    }
    let g = gray(img);
    // Gray levels are multiples of 1/3, so |d| * 3 is an integer in 0..=3060.
    let mut hist = vec![0u32; 3061];
    for y in 0..h - 1 {
        let (r0, r1) = (&g[y * w..(y + 1) * w], &g[(y + 1) * w..(y + 2) * w]);
        for x in 0..w - 1 {
            let d = (r0[x] - r0[x + 1] - r1[x] + r1[x + 1]).abs();
            hist[((d * 3.0).round() as usize).min(3060)] += 1;
        }
    }
    let n = ((w - 1) * (h - 1)) as u64;
    let mut seen = 0u64;
    for (bin, &c) in hist.iter().enumerate() {
        seen += c as u64;
        if 2 * seen >= n {
            return bin as f64 / 3.0;
        }
    }
    unreachable!("histogram covers every sample")
}

pub fn gland_fraction(img: &RgbImage, gray_threshold: f32) -> f64 {
    let n = (img.width() * img.height()) as usize;
    if n == 0 {
        return 0.0;
    }
    let dark = gray(img).into_iter().filter(|&v| v < gray_threshold).count();
    dark as f64 / n as f64
}

/// Center-minus-flanks response of a nucleus footprint whose dark 2×2 core
/// has its top-left corner at `(x, y)`.
fn nucleus_response(g: &[f32], w: usize, x: usize, y: usize) -> f32 {
    let at = |xx: usize, yy: usize| g[yy * w + xx];
    let core = (at(x, y) + at(x + 1, y) + at(x, y + 1) + at(x + 1, y + 1)) / 4.0;
    let left = (at(x - 1, y) + at(x - 1, y + 1)) / 2.0;
    let right = (at(x + 2, y) + at(x + 2, y + 1)) / 2.0;
    (left + right) / 2.0 - core
}

/// Counts nucleus footprints whose response exceeds `1.1 · contrast`,
/// keeping only 3×3 local maxima (ties go to the earlier raster position).
pub fn nucleus_count(img: &RgbImage, contrast: f32) -> usize {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w < 4 || h < 2 {
        return 0;
    }
    let g = gray(img);
    // Response grid over valid core positions x in 1..w-2, y in 0..h-1.
    let (rw, rh) = (w - 3, h - 1);
    let mut resp = vec![f32::NEG_INFINITY; rw * rh];
    for y in 0..rh {
        for x in 0..rw {
            resp[y * rw + x] = nucleus_response(&g, w, x + 1, y);
        }
    }
    let threshold = 1.1 * contrast;
    let mut count = 0;
    for y in 0..rh {
        for x in 0..rw {
            let v = resp[y * rw + x];
            if v <= threshold {
                continue;
            }
            let mut is_max = true;
            'nbhd: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= rw as i64 || ny >= rh as i64 {
                        continue;
                    }
                    let n = resp[ny as usize * rw + nx as usize];
                    let earlier = (dy, dx) < (0, 0);
                    if n > v || (earlier && n == v) {
                        is_max = false;
                        break 'nbhd;
                    }
                }
            }
            if is_max {
                count += 1;
            }
        }
    }
    count
}
