//! Dataset I/O, preprocessing to the canonical square resolution, target
//! masks, synchronized augmentation and synthetic fundus generation.

mod augment;
mod manifest;
mod mask;
mod preprocess;
mod synthetic;

use std::path::PathBuf;

use bifuser_tensor::Tensor;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment, AugmentParams, GeometricTransform};
pub use manifest::{split_four_to_one, Manifest, ManifestRow, Split};
pub use mask::make_fovea_mask;
pub use preprocess::{preprocess, Preprocessor, BACKGROUND_THRESHOLD};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticLayout};

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image contains no pixel above the background threshold")]
    AllBackground,
    #[error("fundus is {fundus:?} but vessel map is {vessel:?} (width, height)")]
    MismatchedShapes { fundus: (u32, u32), vessel: (u32, u32) },
    #[error("image {0:?} is smaller than the 64x64 minimum")]
    TooSmall((u32, u32)),
    #[error("manifest row {row}: missing file {path}")]
    MissingFile { row: usize, path: PathBuf },
    #[error("manifest row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error("synthetic configuration infeasible: {0}")]
    ConfigInfeasible(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = ImagingError> = std::result::Result<T, E>;

/// Pixel position, `x` to the right and `y` down, in pixel-centre units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoveaAnnotation {
    /// Fovea centre at original resolution.
    pub fovea: Point,
    /// Optic-disc radius `R` at original resolution.
    pub od_radius: f64,
    /// `(height, width)` of the original image.
    pub original_size: (usize, usize),
}

impl FoveaAnnotation {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let (h, w) = self.original_size;
        if !(self.fovea.x >= 0.0 && self.fovea.x < w as f64 && self.fovea.y >= 0.0 && self.fovea.y < h as f64) {
            return Err(format!("fovea ({}, {}) outside {w}x{h} image", self.fovea.x, self.fovea.y));
        }
        if !(self.od_radius > 0.0 && self.od_radius.is_finite()) {
            return Err(format!("optic-disc radius {} must be positive", self.od_radius));
        }
        Ok(())
    }
}

/// A fundus photograph with its optional vessel map and annotation.
#[derive(Clone, Debug)]
pub struct RawSample {
    pub id: String,
    pub fundus: RgbImage,
    /// `[1, H, W]` in `[0, 1]`.
    pub vessel: Option<Tensor<f32>>,
    pub annotation: FoveaAnnotation,
}

impl RawSample {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.fundus.dimensions();
        if w < 64 || h < 64 {
            return Err(ImagingError::TooSmall((w, h)));
        }
        if let Some(v) = &self.vessel {
            let shape = v.shape();
            if shape != [1, h as usize, w as usize] {
                let vs = if shape.len() == 3 { (shape[2] as u32, shape[1] as u32) } else { (0, 0) };
                return Err(ImagingError::MismatchedShapes { fundus: (w, h), vessel: vs });
            }
        }
        self.annotation.validate().map_err(|reason| ImagingError::InvalidConfig(format!("sample {}: {reason}", self.id)))
    }
}

/// Crop, pad and scale that took the original image to the canonical square.
///
/// Canonical coordinates use half-pixel centres:
/// `canonical = (original - crop + pad + 0.5) * scale - 0.5`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordTransform {
    pub crop_offset: (usize, usize),
    pub pad_offset: (usize, usize),
    pub scale: f64,
}

impl CoordTransform {
    pub fn identity() -> Self {
        Self { crop_offset: (0, 0), pad_offset: (0, 0), scale: 1.0 }
    }

    pub fn to_canonical(&self, p: Point) -> Point {
        let shift_x = self.pad_offset.0 as f64 - self.crop_offset.0 as f64;
        let shift_y = self.pad_offset.1 as f64 - self.crop_offset.1 as f64;
        Point::new((p.x + shift_x + 0.5) * self.scale - 0.5, (p.y + shift_y + 0.5) * self.scale - 0.5)
    }

    pub fn to_original(&self, p: Point) -> Point {
        let shift_x = self.pad_offset.0 as f64 - self.crop_offset.0 as f64;
        let shift_y = self.pad_offset.1 as f64 - self.crop_offset.1 as f64;
        Point::new((p.x + 0.5) / self.scale - 0.5 - shift_x, (p.y + 0.5) / self.scale - 0.5 - shift_y)
    }

    /// Converts a canonical-frame length to original pixels.
    pub fn length_to_original(&self, len: f64) -> f64 {
        len / self.scale
    }
}

/// A sample at the canonical `S x S` working resolution.
#[derive(Clone, Debug)]
pub struct CanonicalSample {
    pub id: String,
    /// `[3, S, S]`, intensities in `[0, 1]`; channel normalization happens at batching.
    pub fundus: Tensor<f32>,
    /// `[1, S, S]` in `[0, 1]`; zeros when the raw sample had no vessel map.
    pub vessel: Tensor<f32>,
    pub has_vessel: bool,
    /// `[1, S, S]` binary target disc.
    pub mask: Tensor<f32>,
    /// Fovea in the canonical frame (tracks augmentation).
    pub fovea: Point,
    pub transform: CoordTransform,
    pub annotation: FoveaAnnotation,
}

impl CanonicalSample {
    pub fn size(&self) -> usize {
        self.fundus.shape()[2]
    }
}

/// Bilinear sample of one `[H, W]` plane at a continuous position, zero outside.
pub(crate) fn sample_bilinear(plane: &[f32], w: usize, h: usize, x: f64, y: f64) -> f32 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let px = |xi: f64, yi: f64| -> f32 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            plane[yi as usize * w + xi as usize]
        }
    };
    let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1.0, y0) * fx;
    let bot = px(x0, y0 + 1.0) * (1.0 - fx) + px(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bot * fy
}

pub(crate) fn load_rgb(path: &std::path::Path) -> Result<RgbImage> {
    image::open(path).map(|im| im.to_rgb8()).map_err(|source| ImagingError::Image { path: path.to_path_buf(), source })
}

/// Loads an image for inference. The annotation is a placeholder (fovea at
/// the image centre, unit radius) and must not be used for scoring.
pub fn load_unannotated(id: &str, image: &std::path::Path, vessel: Option<&std::path::Path>) -> Result<RawSample> {
    let fundus = load_rgb(image)?;
    let (w, h) = fundus.dimensions();
    let vessel = vessel.map(load_vessel).transpose()?;
    let annotation = FoveaAnnotation { fovea: Point::new(w as f64 / 2.0, h as f64 / 2.0), od_radius: 1.0, original_size: (h as usize, w as usize) };
    let raw = RawSample { id: id.to_string(), fundus, vessel, annotation };
    raw.validate()?;
    Ok(raw)
}

/// Reads a single-channel map, 0..255 mapped to `[0, 1]`.
pub fn load_vessel(path: &std::path::Path) -> Result<Tensor<f32>> {
    let im = image::open(path).map_err(|source| ImagingError::Image { path: path.to_path_buf(), source })?.to_luma8();
    let (w, h) = im.dimensions();
    let data = im.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Tensor::from_vec(&[1, h as usize, w as usize], data).expect("dimensions match buffer"))
}

pub fn save_vessel(map: &Tensor<f32>, path: &std::path::Path) -> Result<()> {
    let (h, w) = (map.shape()[1], map.shape()[2]);
    let bytes: Vec<u8> = map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("buffer size matches")
        .save(path)
        .map_err(|source| ImagingError::Image { path: path.to_path_buf(), source })
}
