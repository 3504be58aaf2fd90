use std::path::{Path, PathBuf};

use bifuser_tensor::{Scalar, Tensor};
use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::EvalResult;

/// Overlay opacity of the heatmap.
pub const OVERLAY_ALPHA: f32 = 0.5;

/// Per-pixel maximum over the token channels of sample `index` in a
/// `[B, hw, n]` attention map, as a row-major `h x w` grid.
pub fn channel_max<T: Scalar>(sam: &Tensor<T>, index: usize) -> (usize, Vec<f64>) {
    let shape = sam.shape();
    let (hw, n) = (shape[1], shape[2]);
    let side = (hw as f64).sqrt().round() as usize;
    assert_eq!(side * side, hw, "attention map must cover a square grid");
    let data = &sam.data()[index * hw * n..(index + 1) * hw * n];
    let out = data.chunks_exact(n).map(|row| row.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max)).collect();
    (side, out)
}

/// Min-max normalizes into `[0, 1]`. A constant map becomes all zeros and
/// `false` is returned.
pub fn normalize_min_max(values: &mut [f64]) -> bool {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    true
}

/// Normalized per-pixel channel maximum at the stage grid.
pub fn attention_heatmap<T: Scalar>(sam: &Tensor<T>, index: usize) -> (usize, Vec<f64>) {
    let (side, mut map) = channel_max(sam, index);
    if !normalize_min_max(&mut map) {
        log::warn!("attention map is constant; writing an all-zero heatmap");
    }
    (side, map)
}

fn jet(v: f32) -> [f32; 3] {
    let c = |x: f32| (1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0);
    [c(3.0), c(2.0), c(1.0)]
}

/// Writes `{id}_stage{i}_raw.png` and `{id}_stage{i}_overlay.png` for every
/// stage. `fundus` is `[3, S, S]` in `[0, 1]`.
pub fn export_attention<T: Scalar>(sams: &[Tensor<T>], index: usize, fundus: &Tensor<f32>, id: &str, out_dir: &Path) -> EvalResult<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let s = fundus.shape()[2];
    let plane = s * s;
    let fd = fundus.data();
    let mut written = Vec::new();
    for (i, sam) in sams.iter().enumerate() {
        let (side, map) = attention_heatmap(sam, index);
        let small: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(side as u32, side as u32, map.iter().map(|&v| v as f32).collect()).expect("grid size");
        let big = imageops::resize(&small, s as u32, s as u32, FilterType::Triangle);
        let raw = GrayImage::from_fn(s as u32, s as u32, |x, y| Luma([(big.get_pixel(x, y)[0].clamp(0.0, 1.0) * 255.0).round() as u8]));
        let overlay = RgbImage::from_fn(s as u32, s as u32, |x, y| {
            let p = y as usize * s + x as usize;
            let heat = jet(big.get_pixel(x, y)[0].clamp(0.0, 1.0));
            Rgb([0, 1, 2].map(|c| {
                let v = (1.0 - OVERLAY_ALPHA) * fd[c * plane + p] + OVERLAY_ALPHA * heat[c];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            }))
        });
        let stage = i + 1;
        let raw_path = out_dir.join(format!("{id}_stage{stage}_raw.png"));
        let overlay_path = out_dir.join(format!("{id}_stage{stage}_overlay.png"));
        raw.save(&raw_path)?;
        overlay.save(&overlay_path)?;
        written.push(overlay_path);
        written.push(raw_path);
    }
    Ok(written)
}
