//! Run configuration: named presets, flat `key = value` files and overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bti::ReduceRecover;
use crate::imaging::{AugmentParams, SyntheticConfig};
use crate::model::{InputMode, ModelConfig, TrainConfig};

pub const PRESETS: [&str; 4] = ["paper-512", "tisu", "smoke", "desk"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown preset {0:?} (expected one of paper-512, tisu, smoke, desk)")]
    UnknownPreset(String),
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: PathBuf, line: usize },
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type ConfigResult<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// 34/18-layer streams, 64 tokens, 12 encoder layers.
    Paper,
    /// Narrow single-block streams for CPU runs.
    Tiny,
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paper" => Ok(Self::Paper),
            "tiny" => Ok(Self::Tiny),
            _ => Err("expected paper or tiny".into()),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Tiny => "tiny",
        })
    }
}

/// Every knob a command can take. [`RunConfig::to_kv`] emits a file that
/// [`RunConfig::resolve`] turns back into the same configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub variant: Variant,
    pub size: usize,
    pub input_mode: InputMode,
    pub reduce_recover: ReduceRecover,
    pub tokens: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub mask_radius: Option<f64>,
    pub train: TrainConfig,
    /// Generated samples for `synth`.
    pub synth_count: usize,
    /// Side of generated images.
    pub synth_size: usize,
    /// Training samples held back for validation.
    pub holdout: usize,
    pub manifest: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(name: &str) -> ConfigResult<Self> {
        let paper = Self {
            preset: "paper-512".into(),
            variant: Variant::Paper,
            size: 512,
            input_mode: InputMode::FundusVessel,
            reduce_recover: ReduceRecover::Learned,
            tokens: None,
            layers: None,
            heads: None,
            mask_radius: None,
            train: TrainConfig::paper(),
            synth_count: 100,
            synth_size: 512,
            holdout: 0,
            manifest: None,
        };
        Ok(match name {
            "paper-512" => paper,
            "tisu" => Self { preset: name.into(), train: TrainConfig::tisu(), ..paper },
            "smoke" => {
                Self { preset: name.into(), variant: Variant::Tiny, size: 128, train: TrainConfig::smoke(), synth_count: 8, synth_size: 128, ..paper }
            }
            "desk" => Self {
                preset: name.into(),
                variant: Variant::Tiny,
                size: 128,
                train: TrainConfig { epochs: 60, validate_every: 10, ..TrainConfig::paper() },
                synth_count: 80,
                synth_size: 128,
                ..paper
            },
            other => return Err(ConfigError::UnknownPreset(other.into())),
        })
    }

    /// Builds from a preset, then a config file, then overrides, later
    /// sources winning. The preset is taken from the overrides, else the
    /// file, else `default_preset`.
    pub fn resolve(default_preset: &str, file: Option<&Path>, overrides: &[(String, String)]) -> ConfigResult<Self> {
        let file_pairs = match file {
            Some(p) => parse_kv_file(p)?,
            None => Vec::new(),
        };
        let preset = overrides.iter().chain(&file_pairs).find(|(k, _)| k == "preset").map_or(default_preset, |(_, v)| v.as_str()).to_string();
        let mut cfg = Self::preset(&preset)?;
        for (k, v) in file_pairs.iter().chain(overrides) {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> ConfigResult<()> {
        fn parse<V: FromStr>(key: &str, value: &str) -> ConfigResult<V>
        where
            V::Err: std::fmt::Display,
        {
            value.trim().parse().map_err(|e: V::Err| ConfigError::BadValue { key: key.into(), value: value.into(), reason: e.to_string() })
        }
        fn opt<V: FromStr>(key: &str, value: &str) -> ConfigResult<Option<V>>
        where
            V::Err: std::fmt::Display,
        {
            if matches!(value.trim(), "" | "none" | "auto") {
                Ok(None)
            } else {
                parse(key, value).map(Some)
            }
        }
        let t = &mut self.train;
        match key {
            "model.variant" => self.variant = parse(key, value)?,
            "model.size" => self.size = parse(key, value)?,
            "model.input_mode" => self.input_mode = parse(key, value)?,
            "model.reduce_recover" => self.reduce_recover = parse(key, value)?,
            "model.tokens" => self.tokens = opt(key, value)?,
            "model.layers" => self.layers = opt(key, value)?,
            "model.heads" => self.heads = opt(key, value)?,
            "model.mask_radius" => self.mask_radius = opt(key, value)?,
            "train.lr0" => t.lr0 = parse(key, value)?,
            "train.lr_min" => t.lr_min = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.max_steps" => t.max_steps = opt(key, value)?,
            "train.seed" | "seed" => t.seed = parse(key, value)?,
            "train.augment" => t.augment = if parse::<bool>(key, value)? { AugmentParams::default() } else { AugmentParams::none() },
            "train.validate_every" => t.validate_every = parse(key, value)?,
            "train.threshold" => t.threshold = parse(key, value)?,
            "data.synth_count" => self.synth_count = parse(key, value)?,
            "data.synth_size" => self.synth_size = parse(key, value)?,
            "data.holdout" => self.holdout = parse(key, value)?,
            "data.manifest" => self.manifest = opt::<String>(key, value)?.map(PathBuf::from),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = match self.variant {
            Variant::Paper => ModelConfig::paper(self.size),
            Variant::Tiny => ModelConfig::tiny(self.size),
        };
        m = m.with_input_mode(self.input_mode).with_strategy(self.reduce_recover);
        for b in &mut m.bti {
            b.n_tokens = self.tokens.unwrap_or(b.n_tokens);
            b.layers = self.layers.unwrap_or(b.layers);
            b.heads = self.heads.unwrap_or(b.heads);
        }
        if let Some(r) = self.mask_radius {
            m.mask_radius = r;
        }
        m
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig { seed: self.seed(), ..SyntheticConfig::new(self.synth_size) }
    }

    /// Flat `key = value` listing of every setting.
    pub fn to_kv(&self) -> String {
        let o = |v: Option<String>| v.unwrap_or_else(|| "auto".into());
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("preset", self.preset.clone());
        put("model.variant", self.variant.to_string());
        put("model.size", self.size.to_string());
        put("model.input_mode", self.input_mode.to_string());
        put("model.reduce_recover", self.reduce_recover.to_string());
        put("model.tokens", o(self.tokens.map(|v| v.to_string())));
        put("model.layers", o(self.layers.map(|v| v.to_string())));
        put("model.heads", o(self.heads.map(|v| v.to_string())));
        put("model.mask_radius", o(self.mask_radius.map(|v| v.to_string())));
        put("train.lr0", t.lr0.to_string());
        put("train.lr_min", t.lr_min.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.max_steps", o(t.max_steps.map(|v| v.to_string())));
        put("train.seed", t.seed.to_string());
        put("train.augment", (t.augment != AugmentParams::none()).to_string());
        put("train.validate_every", t.validate_every.to_string());
        put("train.threshold", t.threshold.to_string());
        put("data.synth_count", self.synth_count.to_string());
        put("data.synth_size", self.synth_size.to_string());
        put("data.holdout", self.holdout.to_string());
        put("data.manifest", o(self.manifest.as_ref().map(|p| p.display().to_string())));
        s
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str, origin: &Path) -> ConfigResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { path: origin.to_path_buf(), line: i + 1 })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_kv_file(path: &Path) -> ConfigResult<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_kv(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_echo_recipes() {
        let p = RunConfig::preset("paper-512").unwrap();
        assert_eq!((p.train.lr0, p.train.epochs, p.train.batch_size), (1e-3, 300, 2));
        assert_eq!(RunConfig::preset("tisu").unwrap().train.lr0, 6e-5);
        assert!(matches!(RunConfig::preset("huge"), Err(ConfigError::UnknownPreset(_))));
        for name in PRESETS {
            assert!(RunConfig::preset(name).unwrap().model_config().validate().is_ok(), "{name}");
        }
    }

    #[test]
    fn precedence_cli_over_file_over_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "preset = smoke\n# comment\ntrain.epochs = 7\ntrain.lr0 = 0.002\n").unwrap();
        let cfg = RunConfig::resolve("paper-512", Some(&path), &[("train.epochs".into(), "9".into())]).unwrap();
        assert_eq!(cfg.preset, "smoke");
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.lr0, 0.002);
        assert_eq!(cfg.train.batch_size, 2);
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = RunConfig::preset("desk").unwrap();
        cfg.set("model.input_mode", "vessel+vessel").unwrap();
        cfg.set("model.reduce_recover", "pooled").unwrap();
        cfg.set("model.tokens", "16").unwrap();
        cfg.set("data.manifest", "data/manifest.csv").unwrap();
        let pairs = parse_kv(&cfg.to_kv(), Path::new("mem")).unwrap();
        let back = RunConfig::resolve("paper-512", None, &pairs).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut cfg = RunConfig::preset("smoke").unwrap();
        assert!(matches!(cfg.set("train.epoch", "3"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(cfg.set("train.epochs", "three"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(cfg.set("model.input_mode", "vessel"), Err(ConfigError::BadValue { .. })));
    }
}
