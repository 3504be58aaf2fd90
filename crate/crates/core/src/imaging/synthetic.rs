use bifuser_tensor::Tensor;
use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FoveaAnnotation, ImagingError, Point, RawSample, Result};

/// Parameters of the procedural fundus generator. Lengths are in pixels of
/// the generated `size x size` image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub size: usize,
    /// Optic-disc radius range `[lo, hi]`.
    pub od_radius: (f64, f64),
    /// Fovea sits this many OD diameters from the OD centre.
    pub fovea_distance_factor: f64,
    /// Uniform jitter `[-j, j]` added to the OD-fovea distance.
    pub distance_jitter: f64,
    /// Arcade curvature in units of `1 / distance`: the arcade passes
    /// `distance / sqrt(k)` off-axis at the depth of the fovea.
    pub curvature: (f64, f64),
    /// Side branches sprouting from the two main arcades.
    pub branch_count: usize,
    pub branch_width: f64,
    /// Per-pixel Gaussian noise standard deviation, in `[0, 1]` intensity units.
    pub noise_std: f64,
    /// Global brightness gain drawn from `[1 - g, 1 + g]`.
    pub brightness_jitter: f64,
    /// Maximum tilt of the OD-fovea axis from horizontal, degrees.
    pub max_tilt_deg: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(size: usize) -> Self {
        let s = size as f64 / 512.0;
        Self {
            size,
            od_radius: (18.0 * s, 24.0 * s),
            fovea_distance_factor: 2.5,
            distance_jitter: 4.0 * s,
            curvature: (0.8, 1.6),
            branch_count: 6,
            branch_width: (6.0 * s).max(1.5),
            noise_std: 0.02,
            brightness_jitter: 0.1,
            max_tilt_deg: 8.0,
            seed: 0,
        }
    }

    /// Radius of the visible retina disc.
    pub fn retina_radius(&self) -> f64 {
        0.47 * self.size as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ImagingError::InvalidConfig(m.to_string()));
        if self.size < 64 {
            return bad("synthetic size must be at least 64");
        }
        let ranges = [("od_radius", self.od_radius), ("curvature", self.curvature)];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(ImagingError::InvalidConfig(format!("{name} range [{lo}, {hi}] is empty or non-positive")));
            }
        }
        if !(self.fovea_distance_factor > 0.0) {
            return bad("fovea_distance_factor must be positive");
        }
        if !(self.distance_jitter >= 0.0 && self.noise_std >= 0.0 && self.branch_width > 0.0) {
            return bad("jitter, noise and branch width must be non-negative");
        }
        if !(0.0..1.0).contains(&self.brightness_jitter) {
            return bad("brightness_jitter must lie in [0, 1)");
        }
        let min_distance = self.fovea_distance_factor * 2.0 * self.od_radius.0 - self.distance_jitter;
        let room = 2.0 * (self.retina_radius() - self.od_radius.1);
        if min_distance > room {
            return Err(ImagingError::ConfigInfeasible(format!(
                "OD-fovea distance of at least {min_distance:.1} px cannot fit in a retina disc allowing {room:.1} px"
            )));
        }
        Ok(())
    }
}

/// Geometry of one generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticLayout {
    pub retina_center: Point,
    pub retina_radius: f64,
    pub od_center: Point,
    pub od_radius: f64,
    pub fovea: Point,
    /// Unit vector from the OD towards the fovea (the arcade symmetry axis).
    pub axis: (f64, f64),
    /// Arcade coefficient: points satisfy `along = k * across^2`.
    pub parabola_k: f64,
    pub branches: Vec<Vec<Point>>,
    pub branch_width: f64,
}

impl SyntheticLayout {
    pub fn sample<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let size = cfg.size as f64;
        let c = Point::new((size - 1.0) / 2.0, (size - 1.0) / 2.0);
        let rho = cfg.retina_radius();
        let od_radius = uniform(rng, cfg.od_radius);
        let jitter = if cfg.distance_jitter > 0.0 { rng.random_range(-cfg.distance_jitter..=cfg.distance_jitter) } else { 0.0 };
        let max_d = 2.0 * (rho - od_radius);
        let d = (cfg.fovea_distance_factor * 2.0 * od_radius + jitter).min(max_d);

        let tilt = if cfg.max_tilt_deg > 0.0 { rng.random_range(-cfg.max_tilt_deg..=cfg.max_tilt_deg).to_radians() } else { 0.0 };
        // Left or right eye: the OD sits on the nasal side.
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let axis = (sign * tilt.cos(), tilt.sin());

        // Midpoint offset keeps both OD and fovea inside the retina.
        let slack = (max_d - d) / 2.0;
        let off = if slack > 0.0 { rng.random_range(-slack..=slack) * 0.5 } else { 0.0 };
        let mid = Point::new(c.x + axis.0 * off, c.y + axis.1 * off);
        let od_center = Point::new(mid.x - axis.0 * d / 2.0, mid.y - axis.1 * d / 2.0);
        let fovea = Point::new(mid.x + axis.0 * d / 2.0, mid.y + axis.1 * d / 2.0);

        let kappa = uniform(rng, cfg.curvature);
        let k = kappa / d.max(1.0);
        let mut layout = Self {
            retina_center: c,
            retina_radius: rho,
            od_center,
            od_radius,
            fovea,
            axis,
            parabola_k: k,
            branches: Vec::new(),
            branch_width: cfg.branch_width,
        };

        // Two main arcades, mirror images across the axis.
        let reach = 1.8 * d;
        let steps = 64;
        for side in [1.0, -1.0] {
            let mut poly = Vec::new();
            for i in 0..=steps {
                let along = reach * i as f64 / steps as f64;
                let across = side * (along / k).sqrt();
                let p = layout.local_to_image(along, across);
                if p.distance(c) > rho {
                    break;
                }
                poly.push(p);
            }
            layout.branches.push(poly);
        }

        // Side branches leave an arcade point roughly perpendicular to it.
        for b in 0..cfg.branch_count {
            let side = if b % 2 == 0 { 1.0 } else { -1.0 };
            let along = rng.random_range(0.2..1.2) * d;
            let across = side * (along / k).sqrt();
            let start = layout.local_to_image(along, across);
            if start.distance(c) > rho {
                continue;
            }
            let outward = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let len = rng.random_range(0.3..0.7) * d;
            let tip_along = along + rng.random_range(0.2..0.6) * len;
            let tip_across = across + outward * side * len;
            let end = layout.local_to_image(tip_along, tip_across);
            let mut poly = vec![start];
            for i in 1..=8 {
                let t = i as f64 / 8.0;
                let p = Point::new(start.x + (end.x - start.x) * t, start.y + (end.y - start.y) * t);
                if p.distance(c) > rho {
                    break;
                }
                poly.push(p);
            }
            if poly.len() > 1 {
                layout.branches.push(poly);
            }
        }
        Ok(layout)
    }

    /// Image point at `along` the axis from the OD and `across` it.
    pub fn local_to_image(&self, along: f64, across: f64) -> Point {
        let (ux, uy) = self.axis;
        Point::new(self.od_center.x + ux * along - uy * across, self.od_center.y + uy * along + ux * across)
    }

    /// Inverse of [`Self::local_to_image`].
    pub fn image_to_local(&self, p: Point) -> (f64, f64) {
        let (ux, uy) = self.axis;
        let (dx, dy) = (p.x - self.od_center.x, p.y - self.od_center.y);
        (ux * dx + uy * dy, -uy * dx + ux * dy)
    }

    /// Distance from `p` to the nearest branch polyline.
    pub fn distance_to_branches(&self, p: Point) -> f64 {
        self.branches.iter().flat_map(|poly| poly.windows(2)).map(|seg| segment_distance(p, seg[0], seg[1])).fold(f64::INFINITY, f64::min)
    }

    /// Binary `[1, S, S]` stroke support: pixels within half the branch width of a polyline.
    pub fn vessel_map(&self, size: usize) -> Tensor<f32> {
        let mut map = Tensor::zeros(&[1, size, size]);
        let half = self.branch_width / 2.0;
        let data = map.data_mut();
        for seg in self.branches.iter().flat_map(|poly| poly.windows(2)) {
            let (a, b) = (seg[0], seg[1]);
            let x0 = (a.x.min(b.x) - half).floor().max(0.0) as usize;
            let y0 = (a.y.min(b.y) - half).floor().max(0.0) as usize;
            let x1 = ((a.x.max(b.x) + half).ceil().max(0.0) as usize).min(size - 1);
            let y1 = ((a.y.max(b.y) + half).ceil().max(0.0) as usize).min(size - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if segment_distance(Point::new(x as f64, y as f64), a, b) <= half {
                        data[y * size + x] = 1.0;
                    }
                }
            }
        }
        map
    }

    fn render<R: Rng + ?Sized>(&self, cfg: &SyntheticConfig, rng: &mut R, vessel: &Tensor<f32>) -> RgbImage {
        let size = cfg.size;
        let gain = 1.0 + if cfg.brightness_jitter > 0.0 { rng.random_range(-cfg.brightness_jitter..=cfg.brightness_jitter) } else { 0.0 };
        let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("finite std");
        let base = [0.72, 0.33, 0.14];
        let od_color = [0.98, 0.88, 0.62];
        let vessel_color = [0.45, 0.12, 0.06];
        let fovea_sigma = 0.8 * self.od_radius;
        RgbImage::from_fn(size as u32, size as u32, |x, y| {
            let p = Point::new(x as f64, y as f64);
            let r = p.distance(self.retina_center);
            if r > self.retina_radius {
                return Rgb([0, 0, 0]);
            }
            let vignette = 1.0 - 0.35 * (r / self.retina_radius).powi(2);
            let od = (-(p.distance(self.od_center) / self.od_radius).powi(4)).exp();
            let fov = (-(p.distance(self.fovea) / fovea_sigma).powi(2) / 2.0).exp();
            let v = vessel.data()[y as usize * size + x as usize] as f64;
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let mut c = base[ch] * vignette;
                c *= 1.0 - 0.55 * fov;
                c = c * (1.0 - 0.8 * v) + vessel_color[ch] * 0.8 * v;
                c = c * (1.0 - od) + od_color[ch] * od;
                c = c * gain + if cfg.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                px[ch] = (c.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            // Keep every retina pixel above the background threshold.
            px[0] = px[0].max(40);
            Rgb(px)
        })
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    p.distance(Point::new(a.x + t * dx, a.y + t * dy))
}

/// Draws a layout and renders it to a fundus image with its vessel map.
pub fn generate_synthetic<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> Result<(RawSample, SyntheticLayout)> {
    let layout = SyntheticLayout::sample(cfg, rng)?;
    let vessel = layout.vessel_map(cfg.size);
    let fundus = layout.render(cfg, rng, &vessel);
    let sample = RawSample {
        id: "synthetic".into(),
        fundus,
        vessel: Some(vessel),
        annotation: FoveaAnnotation { fovea: layout.fovea, od_radius: layout.od_radius, original_size: (cfg.size, cfg.size) },
    };
    Ok((sample, layout))
}
