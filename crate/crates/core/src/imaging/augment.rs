use bifuser_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample_bilinear, CanonicalSample, Point};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip_prob: f64,
    /// Rotation drawn uniformly from `[-max, max]` degrees.
    pub max_rotation_deg: f64,
    /// Scale drawn uniformly from `[1 - j, 1 + j]`.
    pub scale_jitter: f64,
    /// Additive brightness offset drawn from `[-b, b]` (fundus only).
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]` (fundus only).
    pub contrast: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { flip_prob: 0.5, max_rotation_deg: 15.0, scale_jitter: 0.1, brightness: 0.1, contrast: 0.1 }
    }
}

impl AugmentParams {
    pub fn none() -> Self {
        Self { flip_prob: 0.0, max_rotation_deg: 0.0, scale_jitter: 0.0, brightness: 0.0, contrast: 0.0 }
    }
}

/// Horizontal flip, then rotation and scaling about the image centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricTransform {
    pub flip: bool,
    pub angle_rad: f64,
    pub scale: f64,
    pub size: usize,
}

impl GeometricTransform {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.angle_rad == 0.0 && self.scale == 1.0
    }

    fn center(&self) -> f64 {
        (self.size as f64 - 1.0) / 2.0
    }

    pub fn apply(&self, p: Point) -> Point {
        let c = self.center();
        let x = if self.flip { self.size as f64 - 1.0 - p.x } else { p.x };
        let (dx, dy) = (x - c, p.y - c);
        let (s, co) = self.angle_rad.sin_cos();
        Point::new(c + self.scale * (co * dx - s * dy), c + self.scale * (s * dx + co * dy))
    }

    pub fn invert(&self, q: Point) -> Point {
        let c = self.center();
        let (dx, dy) = ((q.x - c) / self.scale, (q.y - c) / self.scale);
        let (s, co) = self.angle_rad.sin_cos();
        let x = c + co * dx + s * dy;
        let y = c - s * dx + co * dy;
        let x = if self.flip { self.size as f64 - 1.0 - x } else { x };
        Point::new(x, y)
    }

    fn warp(&self, t: &Tensor<f32>, nearest: bool) -> Tensor<f32> {
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut out = Vec::with_capacity(t.numel());
        for ch in 0..c {
            let plane = &t.data()[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let p = self.invert(Point::new(x as f64, y as f64));
                    out.push(if nearest {
                        let (xi, yi) = (p.x.round(), p.y.round());
                        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
                            0.0
                        } else {
                            plane[yi as usize * w + xi as usize]
                        }
                    } else {
                        sample_bilinear(plane, w, h, p.x, p.y)
                    });
                }
            }
        }
        Tensor::from_vec(t.shape(), out).expect("same shape")
    }
}

/// Draws one geometric transform and applies it to fundus, vessel and mask
/// (nearest-neighbour for the mask) and to the fovea; photometric jitter
/// touches the fundus only.
pub fn augment<R: Rng + ?Sized>(sample: &CanonicalSample, rng: &mut R, params: &AugmentParams) -> CanonicalSample {
    let size = sample.size();
    let flip = params.flip_prob > 0.0 && rng.random_bool(params.flip_prob.min(1.0));
    let angle = if params.max_rotation_deg > 0.0 { rng.random_range(-params.max_rotation_deg..=params.max_rotation_deg).to_radians() } else { 0.0 };
    let scale = if params.scale_jitter > 0.0 { rng.random_range(1.0 - params.scale_jitter..=1.0 + params.scale_jitter) } else { 1.0 };
    let brightness = if params.brightness > 0.0 { rng.random_range(-params.brightness..=params.brightness) } else { 0.0 };
    let contrast = if params.contrast > 0.0 { rng.random_range(1.0 - params.contrast..=1.0 + params.contrast) } else { 1.0 };
    let geo = GeometricTransform { flip, angle_rad: angle, scale, size };
    apply(sample, &geo, brightness as f32, contrast as f32)
}

/// Applies a fixed geometric transform and photometric adjustment.
pub(crate) fn apply(sample: &CanonicalSample, geo: &GeometricTransform, brightness: f32, contrast: f32) -> CanonicalSample {
    let mut out = sample.clone();
    if !geo.is_identity() {
        out.fundus = geo.warp(&sample.fundus, false);
        out.vessel = geo.warp(&sample.vessel, false);
        out.mask = geo.warp(&sample.mask, true);
        out.fovea = geo.apply(sample.fovea);
    }
    if brightness != 0.0 || contrast != 1.0 {
        for v in out.fundus.data_mut() {
            *v = ((*v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
        }
    }
    out
}
