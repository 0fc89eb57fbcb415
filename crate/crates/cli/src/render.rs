use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use ndarray::Array2;

const CELL: u32 = 24;

/// Diverging heatmap of a CAM: red for positive, blue for negative, scaled
/// by the largest magnitude. PAD rows and columns are grey.
pub fn render_heatmap(values: &Array2<f64>, pad_count: usize) -> RgbImage {
    let l = values.nrows() as u32;
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    RgbImage::from_fn(l * CELL, l * CELL, |x, y| {
        let (i, j) = ((y / CELL) as usize, (x / CELL) as usize);
        if i < pad_count || j < pad_count {
            return Rgb([160, 160, 160]);
        }
        let v = if peak > 0.0 { values[[i, j]] / peak } else { 0.0 };
        let fade = (255.0 * (1.0 - v.abs())).round() as u8;
        if v >= 0.0 {
            Rgb([255, fade, fade])
        } else {
            Rgb([fade, fade, 255])
        }
    })
}

pub fn write_heatmap(values: &Array2<f64>, pad_count: usize, path: &Path) -> Result<()> {
    render_heatmap(values, pad_count)
        .save(path)
        .with_context(|| format!("cannot write heatmap {}", path.display()))
}
