use bifuser_tensor::Tensor;
use image::RgbImage;

use super::{make_fovea_mask, sample_bilinear, CanonicalSample, CoordTransform, ImagingError, RawSample, Result};

/// A pixel is content when its largest channel exceeds this fraction of full scale.
pub const BACKGROUND_THRESHOLD: f32 = 10.0 / 255.0;

/// Black-border removal, symmetric zero padding to a square, resampling to `size`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preprocessor {
    pub size: usize,
    /// Target disc radius in canonical pixels.
    pub mask_radius: f64,
    pub background_threshold: f32,
}

impl Preprocessor {
    /// Mask radius scales as 16 px per 512 px of canonical size.
    pub fn new(size: usize) -> Self {
        Self { size, mask_radius: 16.0 * size as f64 / 512.0, background_threshold: BACKGROUND_THRESHOLD }
    }

    pub fn with_mask_radius(mut self, r: f64) -> Self {
        self.mask_radius = r;
        self
    }

    /// Inclusive content bounding box `(x0, y0, x1, y1)`.
    fn content_bbox(&self, im: &RgbImage) -> Option<(usize, usize, usize, usize)> {
        let limit = self.background_threshold * 255.0;
        let (w, h) = im.dimensions();
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for y in 0..h {
            for x in 0..w {
                let p = im.get_pixel(x, y).0;
                if p.iter().map(|&c| c as f32).fold(0.0, f32::max) > limit {
                    let (x, y) = (x as usize, y as usize);
                    bbox = Some(match bbox {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        bbox
    }

    pub fn run(&self, raw: &RawSample) -> Result<CanonicalSample> {
        raw.validate()?;
        let (x0, y0, x1, y1) = self.content_bbox(&raw.fundus).ok_or(ImagingError::AllBackground)?;
        let (cw, ch) = (x1 - x0 + 1, y1 - y0 + 1);
        let side = cw.max(ch);
        let transform =
            CoordTransform { crop_offset: (x0, y0), pad_offset: ((side - cw) / 2, (side - ch) / 2), scale: self.size as f64 / side as f64 };
        let crop = Crop { x0, y0, cw, ch };

        let (w, h) = (raw.fundus.width() as usize, raw.fundus.height() as usize);
        let mut planes = vec![vec![0f32; w * h]; 3];
        for (i, p) in raw.fundus.pixels().enumerate() {
            for c in 0..3 {
                planes[c][i] = p.0[c] as f32 / 255.0;
            }
        }
        let s = self.size;
        let mut fundus = Vec::with_capacity(3 * s * s);
        for plane in &planes {
            fundus.extend(resample(plane, w, h, &transform, &crop, s));
        }
        let (vessel, has_vessel) = match &raw.vessel {
            Some(v) => (resample(v.data(), w, h, &transform, &crop, s), true),
            None => (vec![0.0; s * s], false),
        };
        let fovea = transform.to_canonical(raw.annotation.fovea);
        Ok(CanonicalSample {
            id: raw.id.clone(),
            fundus: Tensor::from_vec(&[3, s, s], fundus).expect("size"),
            vessel: Tensor::from_vec(&[1, s, s], vessel).expect("size"),
            has_vessel,
            mask: make_fovea_mask(fovea, self.mask_radius, s),
            fovea,
            transform,
            annotation: raw.annotation.clone(),
        })
    }
}

/// [`Preprocessor::run`] with default threshold and mask radius.
pub fn preprocess(raw: &RawSample, size: usize) -> Result<CanonicalSample> {
    Preprocessor::new(size).run(raw)
}

struct Crop {
    x0: usize,
    y0: usize,
    cw: usize,
    ch: usize,
}

/// Bilinear resampling of the cropped, padded square; zero outside the crop.
fn resample(plane: &[f32], w: usize, _h: usize, t: &CoordTransform, crop: &Crop, size: usize) -> Vec<f32> {
    // Work on the cropped window so padding and out-of-crop pixels read as zero.
    let mut window = vec![0f32; crop.cw * crop.ch];
    for y in 0..crop.ch {
        let src = (crop.y0 + y) * w + crop.x0;
        window[y * crop.cw..(y + 1) * crop.cw].copy_from_slice(&plane[src..src + crop.cw]);
    }
    let mut out = Vec::with_capacity(size * size);
    for v in 0..size {
        let sy = (v as f64 + 0.5) / t.scale - 0.5 - t.pad_offset.1 as f64;
        for u in 0..size {
            let sx = (u as f64 + 0.5) / t.scale - 0.5 - t.pad_offset.0 as f64;
            out.push(sample_bilinear(&window, crop.cw, crop.ch, sx, sy));
        }
    }
    out
}
