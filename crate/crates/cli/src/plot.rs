//! Confusion-matrix heat maps.

use image::{Rgb, RgbImage};
use polyp_core::metrics::ConfusionMatrix;

const CELL_PX: u32 = 48;
const GRID_PX: u32 = 2;
const GRID_RGB: Rgb<u8> = Rgb([255, 255, 255]);

/// Row-normalised heat map: white for 0, dark blue for a full row. Rows are
/// true classes, columns predictions, in matrix order.
pub fn heat_map(cm: &ConfusionMatrix) -> RgbImage {
    let k = cm.k() as u32;
    let side = k * CELL_PX + (k + 1) * GRID_PX;
    let mut img = RgbImage::from_pixel(side, side, GRID_RGB);
    for (r, row) in cm.counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (c, &n) in row.iter().enumerate() {
            let frac = if total == 0 { 0.0 } else { n as f64 / total as f64 };
            let shade = |full: f64| (255.0 + (full - 255.0) * frac).round() as u8;
            let colour = Rgb([shade(8.0), shade(48.0), shade(107.0)]);
            let x0 = GRID_PX + c as u32 * (CELL_PX + GRID_PX);
            let y0 = GRID_PX + r as u32 * (CELL_PX + GRID_PX);
            for y in y0..y0 + CELL_PX {
                for x in x0..x0 + CELL_PX {
                    img.put_pixel(x, y, colour);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_shades_only_the_diagonal() {
        let mut cm = ConfusionMatrix::zeros(vec!["a".into(), "b".into()]);
        cm.counts[0][0] = 3;
        cm.counts[1][1] = 1;
        let img = heat_map(&cm);
        assert_eq!(img.width(), 2 * CELL_PX + 3 * GRID_PX);
        let centre = |r: u32, c: u32| {
            *img.get_pixel(
                GRID_PX + c * (CELL_PX + GRID_PX) + 1,
                GRID_PX + r * (CELL_PX + GRID_PX) + 1,
            )
        };
        assert_eq!(centre(0, 0), Rgb([8, 48, 107]));
        assert_eq!(centre(1, 1), Rgb([8, 48, 107]));
        assert_eq!(centre(0, 1), Rgb([255, 255, 255]));
    }
}
