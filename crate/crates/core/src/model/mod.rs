//! Network assembly, objective, training loop, checkpoints and inference.

mod checkpoint;
mod extract;
mod train;

use std::sync::Arc;

use bifuser_tensor::{Graph, ParamBuilder, ParamStore, Scalar, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{residual_reinject, ResidualStream, StreamConfig};
use crate::bti::{Bti, BtiConfig, ReduceRecover};
use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{NetError, NetResult};
use crate::imaging::{CanonicalSample, ImagingError};

pub use checkpoint::{Checkpoint, CheckpointHeader, LoadedCheckpoint, RngState, TensorEntry, TensorRole, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use extract::{extract_fovea, median, LocalizationResult, DEFAULT_THRESHOLD};
pub use train::{fit, mean_error, EpochRecord, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("input mode {mode} needs a vessel map for sample {id}; supply one or switch to fundus+fundus or fundus-only")]
    MissingVessel { mode: InputMode, id: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Net(e.into())
    }
}

pub type ModelResult<T> = std::result::Result<T, ModelError>;

/// What each stream receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputMode {
    #[serde(rename = "fundus+vessel")]
    FundusVessel,
    #[serde(rename = "fundus+fundus")]
    FundusFundus,
    #[serde(rename = "vessel+vessel")]
    VesselVessel,
    /// Satellite stream is fed zeros.
    #[serde(rename = "fundus-only")]
    FundusOnly,
}

impl InputMode {
    pub const ALL: [InputMode; 4] = [Self::FundusVessel, Self::FundusFundus, Self::VesselVessel, Self::FundusOnly];

    pub fn name(self) -> &'static str {
        match self {
            Self::FundusVessel => "fundus+vessel",
            Self::FundusFundus => "fundus+fundus",
            Self::VesselVessel => "vessel+vessel",
            Self::FundusOnly => "fundus-only",
        }
    }

    pub fn satellite_channels(self) -> usize {
        match self {
            Self::FundusFundus => 3,
            _ => 1,
        }
    }

    pub fn needs_vessel(self) -> bool {
        matches!(self, Self::FundusVessel | Self::VesselVessel)
    }
}

impl std::fmt::Display for InputMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for InputMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown input mode {s:?} (expected one of fundus+vessel, fundus+fundus, vessel+vessel, fundus-only)"))
    }
}

/// Per-channel fundus normalization; vessel maps pass through unscaled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }
}

impl Normalization {
    /// Mean and standard deviation over all fundus pixels inside the retina
    /// (non-zero pixels).
    pub fn from_samples(samples: &[CanonicalSample]) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut count = 0f64;
        for s in samples {
            let plane = s.size() * s.size();
            let d = s.fundus.data();
            for p in 0..plane {
                let px = [d[p] as f64, d[plane + p] as f64, d[2 * plane + p] as f64];
                if px.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for c in 0..3 {
                    sum[c] += px[c];
                    sq[c] += px[c] * px[c];
                }
                count += 1.0;
            }
        }
        if count == 0.0 {
            return Self::default();
        }
        let mean = sum.map(|s| s / count);
        let std = [0, 1, 2].map(|c| (sq[c] / count - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3));
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Canonical input side `S` (divisible by 32).
    pub size: usize,
    pub main: StreamConfig,
    pub satellite: StreamConfig,
    /// One configuration per fusion stage.
    pub bti: Vec<BtiConfig>,
    pub decoder: DecoderConfig,
    pub input_mode: InputMode,
    /// Target disc radius in canonical pixels.
    pub mask_radius: f64,
}

impl ModelConfig {
    /// Full-size configuration: 34- and 18-layer streams, 64 tokens, 12 encoder layers.
    pub fn paper(size: usize) -> Self {
        Self {
            size,
            main: StreamConfig::resnet34(3),
            satellite: StreamConfig::resnet18(1),
            bti: vec![BtiConfig::default(); 4],
            decoder: DecoderConfig::default(),
            input_mode: InputMode::FundusVessel,
            mask_radius: 16.0 * size as f64 / 512.0,
        }
    }

    /// Small configuration for CPU training and tests.
    pub fn tiny(size: usize) -> Self {
        let channels = [8, 16, 32, 32];
        let bti = BtiConfig { n_tokens: 4, layers: 1, heads: 2, ffn_ratio: 2, strategy: ReduceRecover::Learned, feature_groups: 4 };
        Self {
            size,
            main: StreamConfig { blocks: [1, 1, 1, 1], channels, in_channels: 3 },
            satellite: StreamConfig { blocks: [1, 1, 1, 1], channels, in_channels: 1 },
            bti: vec![bti; 4],
            decoder: DecoderConfig { out_channels: [16, 16, 8, 8], depths: Self::fitting_depths(size, [4, 4, 5, 6]), bottleneck_dilated: true },
            input_mode: InputMode::FundusVessel,
            mask_radius: 16.0 * size as f64 / 512.0,
        }
    }

    /// Caps U depths (B4..B1) so every pooled block fits its stage resolution.
    pub fn fitting_depths(size: usize, wanted: [usize; 4]) -> [usize; 4] {
        let mut out = wanted;
        for (k, d) in out.iter_mut().enumerate().skip(1) {
            let side = StreamConfig::stage_size(size, 4 - k);
            let max_depth = (usize::BITS - side.max(1).leading_zeros()) as usize;
            *d = (*d).min(max_depth).max(2);
        }
        out
    }

    pub fn with_input_mode(mut self, mode: InputMode) -> Self {
        self.input_mode = mode;
        self.satellite.in_channels = mode.satellite_channels();
        self
    }

    pub fn with_strategy(mut self, strategy: ReduceRecover) -> Self {
        for b in &mut self.bti {
            b.strategy = strategy;
        }
        self
    }

    pub fn validate(&self) -> NetResult<()> {
        let bad = |m: String| Err(NetError::InvalidConfig(m));
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return bad(format!("canonical size {} must be a positive multiple of 32", self.size));
        }
        if self.main.in_channels != 3 {
            return bad("main stream takes 3 input channels".into());
        }
        if self.satellite.in_channels != self.input_mode.satellite_channels() {
            return bad(format!(
                "satellite stream has {} input channels but mode {} supplies {}",
                self.satellite.in_channels,
                self.input_mode,
                self.input_mode.satellite_channels()
            ));
        }
        if self.main.channels != self.satellite.channels {
            return bad("both streams need equal widths at every stage".into());
        }
        if self.bti.len() != 4 {
            return bad(format!("expected 4 fusion configurations, got {}", self.bti.len()));
        }
        self.main.validate()?;
        self.satellite.validate()?;
        for (i, b) in self.bti.iter().enumerate() {
            b.validate(2 * self.main.channels[i])?;
        }
        if !(self.mask_radius >= 0.0) {
            return bad("mask radius must be non-negative".into());
        }
        Ok(())
    }

    /// Side length of stage `i` (1-based).
    pub fn stage_size(&self, i: usize) -> usize {
        StreamConfig::stage_size(self.size, i)
    }
}

/// Network outputs for one batch.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, 1, S, S]`.
    pub logits: Var,
    /// Spatial attention maps `[B, hw_i, n]` of the four fusion stages.
    pub attention: [Var; 4],
}

/// Network inputs for one batch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[B, 3, S, S]`, normalized.
    pub fundus: Tensor<T>,
    /// `[B, 1, S, S]` in `[0, 1]`.
    pub vessel: Tensor<T>,
    /// `[B, 1, S, S]` binary.
    pub mask: Arc<Tensor<T>>,
}

/// The dual-stream network with its parameters.
#[derive(Clone, Debug)]
pub struct BiFuser<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub normalization: Normalization,
    main: ResidualStream,
    satellite: ResidualStream,
    bti: Vec<Bti>,
    decoder: Decoder,
}

impl<T: Scalar> BiFuser<T> {
    /// Builds the network with weights drawn from a generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> NetResult<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let main = ResidualStream::new(&mut b.child("main"), &config.main)?;
        let satellite = ResidualStream::new(&mut b.child("satellite"), &config.satellite)?;
        let bti = (0..4)
            .map(|i| Bti::new(&mut b.child(&format!("bti{}", i + 1)), config.main.channels[i], &config.bti[i]))
            .collect::<NetResult<Vec<_>>>()?;
        let decoder = Decoder::new(&mut b.child("decoder"), &config.decoder, config.main.channels, config.satellite.channels)?;
        Ok(Self { config, store, normalization: Normalization::default(), main, satellite, bti, decoder })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.trainable().map(|id| self.store.get(id).numel()).sum()
    }

    pub fn fusion_modules(&self) -> &[Bti] {
        &self.bti
    }

    /// `fundus` is `[B, 3, S, S]` (already normalized), `vessel` is `[B, 1, S, S]`.
    pub fn forward(&self, g: &mut Graph<'_, T>, fundus: Var, vessel: Var) -> NetResult<ForwardOutput> {
        let s = self.config.size;
        let (b, _, _, _) = g.value(fundus).dims4()?;
        for (v, c, op) in [(fundus, 3, "fundus input"), (vessel, 1, "vessel input")] {
            if g.shape(v) != [b, c, s, s] {
                return Err(TensorError::ShapeMismatch { op, expected: vec![b, c, s, s], got: g.shape(v).to_vec() }.into());
            }
        }
        let (main_in, sat_in) = match self.config.input_mode {
            InputMode::FundusVessel => (fundus, vessel),
            InputMode::FundusFundus => (fundus, fundus),
            InputMode::VesselVessel => (g.tape.concat(&[vessel, vessel, vessel], 1)?, vessel),
            InputMode::FundusOnly => (fundus, g.input(Tensor::zeros(&[b, 1, s, s]))),
        };
        let mut m = self.main.stage_forward(g, 1, main_in)?;
        let mut sat = self.satellite.stage_forward(g, 1, sat_in)?;
        let mut skips = Vec::with_capacity(4);
        let mut attention = Vec::with_capacity(4);
        for i in 0..4 {
            if i > 0 {
                m = self.main.stage_forward(g, i + 1, m)?;
                sat = self.satellite.stage_forward(g, i + 1, sat)?;
            }
            let out = self.bti[i].forward(g, m, sat)?;
            m = residual_reinject(g, m, out.main)?;
            sat = residual_reinject(g, sat, out.satellite)?;
            skips.push((m, sat));
            attention.push(out.attention);
        }
        let skips: [(Var, Var); 4] = skips.try_into().expect("four stages");
        let logits = self.decoder.forward(g, &skips, s)?;
        Ok(ForwardOutput { logits, attention: attention.try_into().expect("four stages") })
    }

    /// Stacks samples into a normalized batch.
    pub fn batch(&self, samples: &[&CanonicalSample]) -> ModelResult<Batch<T>> {
        let s = self.config.size;
        let b = samples.len();
        if b == 0 {
            return Err(ModelError::EmptyDataset);
        }
        let plane = s * s;
        let mut fundus = Vec::with_capacity(b * 3 * plane);
        let mut vessel = Vec::with_capacity(b * plane);
        let mut mask = Vec::with_capacity(b * plane);
        for sample in samples {
            if sample.size() != s {
                return Err(TensorError::ShapeMismatch { op: "sample size", expected: vec![s], got: vec![sample.size()] }.into());
            }
            if self.config.input_mode.needs_vessel() && !sample.has_vessel {
                return Err(ModelError::MissingVessel { mode: self.config.input_mode, id: sample.id.clone() });
            }
            let n = &self.normalization;
            for c in 0..3 {
                let (mu, sd) = (n.mean[c], n.std[c]);
                fundus.extend(sample.fundus.data()[c * plane..(c + 1) * plane].iter().map(|&v| T::lit((v as f64 - mu) / sd)));
            }
            vessel.extend(sample.vessel.data().iter().map(|&v| T::lit(v as f64)));
            mask.extend(sample.mask.data().iter().map(|&v| T::lit(v as f64)));
        }
        Ok(Batch {
            fundus: Tensor::from_vec(&[b, 3, s, s], fundus)?,
            vessel: Tensor::from_vec(&[b, 1, s, s], vessel)?,
            mask: Arc::new(Tensor::from_vec(&[b, 1, s, s], mask)?),
        })
    }

    /// Runs a batch through the network on graph `g`.
    pub fn forward_batch(&self, g: &mut Graph<'_, T>, batch: &Batch<T>) -> NetResult<ForwardOutput> {
        let f = g.input(batch.fundus.clone());
        let v = g.input(batch.vessel.clone());
        self.forward(g, f, v)
    }

    /// Eval-mode probability maps `[B, 1, S, S]` and attention maps `[B, hw_i, n]`.
    pub fn infer(&self, samples: &[&CanonicalSample]) -> ModelResult<(Tensor<T>, [Tensor<T>; 4])> {
        let batch = self.batch(samples)?;
        let mut g = Graph::eval(&self.store);
        let out = self.forward_batch(&mut g, &batch)?;
        let probs = g.value(out.logits).map(bifuser_tensor::sigmoid);
        let attention = out.attention.map(|a| g.value(a).clone());
        Ok((probs, attention))
    }

    /// Localizes the fovea in each sample.
    pub fn predict(&self, samples: &[&CanonicalSample], threshold: f64) -> ModelResult<Vec<LocalizationResult>> {
        let (probs, _) = self.infer(samples)?;
        let s = self.config.size;
        Ok(samples
            .iter()
            .enumerate()
            .map(|(i, sample)| {
                let map = probs.narrow(0, i, 1).expect("batch index").into_reshape(&[s, s]).expect("square map");
                extract_fovea(&map, &sample.transform, threshold)
            })
            .collect())
    }
}

/// Dice plus binary cross-entropy on logits; warns when a target is empty.
pub fn loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, mask: Arc<Tensor<T>>) -> NetResult<Var> {
    let (b, _, _, _) = mask.dims4()?;
    let per = mask.numel() / b.max(1);
    for i in 0..b {
        if mask.data()[i * per..(i + 1) * per].iter().all(|v| *v == T::zero()) {
            log::warn!("target mask {i} of the batch is empty; loss relies on the dice smoothing term");
        }
    }
    Ok(g.tape.dice_bce(logits, mask, T::one())?)
}
