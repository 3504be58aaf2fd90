use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_rgb, load_vessel, FoveaAnnotation, ImagingError, Point, RawSample, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train or test)")),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One manifest line. Paths are stored as written; relative paths resolve
/// against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_path: String,
    #[serde(default)]
    pub vessel_path: String,
    pub fovea_x: f64,
    pub fovea_y: f64,
    pub od_radius_px: f64,
    #[serde(default)]
    pub split: String,
}

/// A validated manifest. Errors number data rows from 1, excluding the header. Images are decoded only when a sample is requested.
#[derive(Clone, Debug)]
pub struct Manifest {
    root: PathBuf,
    rows: Vec<ManifestRow>,
    splits: Vec<Split>,
}

impl Manifest {
    /// Parses and validates every row: files must exist, numbers must be
    /// finite and the fovea must fall inside the image.
    pub fn load(path: &Path) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let headers = reader.headers()?.clone();
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let bad = |reason: String| ImagingError::BadRow { row: i + 1, reason };
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            for column in ["image_path", "fovea_x", "fovea_y", "od_radius_px"] {
                let value = headers.iter().position(|h| h == column).and_then(|k| rec.get(k));
                if value.is_none_or(str::is_empty) {
                    return Err(bad(format!("missing {column}")));
                }
            }
            rows.push(rec.deserialize::<ManifestRow>(Some(&headers)).map_err(|e| bad(e.to_string()))?);
        }
        let manifest = Self::from_rows(root, rows)?;
        log::info!("loaded manifest {} with {} rows", path.display(), manifest.len());
        Ok(manifest)
    }

    pub fn from_rows(root: PathBuf, rows: Vec<ManifestRow>) -> Result<Self> {
        let mut explicit = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let bad = |reason: String| ImagingError::BadRow { row: i + 1, reason };
            let image = root.join(&row.image_path);
            if !image.is_file() {
                return Err(ImagingError::MissingFile { row: i + 1, path: image });
            }
            if !row.vessel_path.is_empty() && !root.join(&row.vessel_path).is_file() {
                return Err(ImagingError::MissingFile { row: i + 1, path: root.join(&row.vessel_path) });
            }
            if !(row.fovea_x.is_finite() && row.fovea_y.is_finite()) {
                return Err(bad("fovea coordinates must be finite".into()));
            }
            let (w, h) = image::image_dimensions(&image).map_err(|source| ImagingError::Image { path: image.clone(), source })?;
            let ann =
                FoveaAnnotation { fovea: Point::new(row.fovea_x, row.fovea_y), od_radius: row.od_radius_px, original_size: (h as usize, w as usize) };
            ann.validate().map_err(bad)?;
            explicit.push(if row.split.is_empty() { None } else { Some(row.split.parse::<Split>().map_err(bad)?) });
        }
        let keys: Vec<&str> = rows.iter().map(|r| r.image_path.as_str()).collect();
        let hashed = split_four_to_one(&keys);
        let splits = explicit.into_iter().zip(hashed).map(|(e, h)| e.unwrap_or(h)).collect();
        Ok(Self { root, rows, splits })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.splits[index]
    }

    /// Row indices belonging to `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Sample id: the image file stem.
    pub fn id(&self, index: usize) -> String {
        Path::new(&self.rows[index].image_path).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("row{index}"))
    }

    pub fn sample(&self, index: usize) -> Result<RawSample> {
        let row = &self.rows[index];
        let fundus = load_rgb(&self.root.join(&row.image_path))?;
        let vessel = if row.vessel_path.is_empty() { None } else { Some(load_vessel(&self.root.join(&row.vessel_path))?) };
        let (w, h) = fundus.dimensions();
        let sample = RawSample {
            id: self.id(index),
            fundus,
            vessel,
            annotation: FoveaAnnotation {
                fovea: Point::new(row.fovea_x, row.fovea_y),
                od_radius: row.od_radius_px,
                original_size: (h as usize, w as usize),
            },
        };
        sample.validate()?;
        Ok(sample)
    }

    /// Lazily loads every sample of `split`.
    pub fn iter_split(&self, split: Split) -> impl Iterator<Item = Result<RawSample>> + '_ {
        self.indices(split).into_iter().map(move |i| self.sample(i))
    }

    pub fn write(path: &Path, rows: &[ManifestRow]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        if rows.is_empty() {
            w.write_record(["image_path", "vessel_path", "fovea_x", "fovea_y", "od_radius_px", "split"])?;
        }
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Deterministic 4:1 split: the `round(n / 5)` keys with the smallest FNV-1a
/// hashes go to the test set (ties broken by position).
pub fn split_four_to_one(keys: &[&str]) -> Vec<Split> {
    let n_test = (keys.len() as f64 / 5.0).round() as usize;
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by_key(|&i| (fnv1a(keys[i]), i));
    let mut out = vec![Split::Train; keys.len()];
    for &i in &order[..n_test] {
        out[i] = Split::Test;
    }
    out
}
