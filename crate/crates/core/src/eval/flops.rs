use bifuser_tensor::{Conv2dSpec, PoolSpec};
use serde::{Deserialize, Serialize};

use crate::backbone::StreamConfig;
use crate::decoder::{Decoder, RsuConfig};
use crate::model::ModelConfig;

/// Published totals for the default configuration, in GFLOPs.
pub const PUBLISHED_TOTAL_GFLOPS: f64 = 62.11;
pub const PUBLISHED_TOKEN_LEARNER_GFLOPS: f64 = 0.85;
pub const PUBLISHED_TOKEN_FUSER_GFLOPS: f64 = 0.61;

/// FLOPs of one fusion stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BtiFlops {
    pub token_learn: u64,
    pub mhsa: u64,
    pub token_fuse: u64,
    /// The `n^2 d` token-mixing part of `mhsa`.
    pub attention_term: u64,
}

impl BtiFlops {
    pub fn total(&self) -> u64 {
        self.token_learn + self.mhsa + self.token_fuse
    }
}

/// Per-sample FLOPs, counted as two per multiply-accumulate. Normalization,
/// activation, pooling and resampling are not counted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub backbone_main: u64,
    pub backbone_satellite: u64,
    pub bti: Vec<BtiFlops>,
    pub decoder: u64,
    pub head: u64,
    pub total: u64,
}

impl FlopsBreakdown {
    pub fn token_learn(&self) -> u64 {
        self.bti.iter().map(|b| b.token_learn).sum()
    }

    pub fn token_fuse(&self) -> u64 {
        self.bti.iter().map(|b| b.token_fuse).sum()
    }

    pub fn mhsa(&self) -> u64 {
        self.bti.iter().map(|b| b.mhsa).sum()
    }

    pub fn attention_term(&self) -> u64 {
        self.bti.iter().map(|b| b.attention_term).sum()
    }

    /// Multiply-accumulates, half the FLOPs.
    pub fn macs(&self) -> u64 {
        self.total / 2
    }

    /// Percent deviation of total, token-learner and token-fuser GMACs from
    /// the published figures.
    pub fn deviations(&self) -> [f64; 3] {
        let m = |f: u64| f as f64 / 2e9;
        [
            deviation_percent(m(self.total), PUBLISHED_TOTAL_GFLOPS),
            deviation_percent(m(self.token_learn()), PUBLISHED_TOKEN_LEARNER_GFLOPS),
            deviation_percent(m(self.token_fuse()), PUBLISHED_TOKEN_FUSER_GFLOPS),
        ]
    }

    /// Published figures match multiply-accumulate counts, the convention of
    /// common profilers, so the comparison is made on GMACs.
    pub fn published_comparison(&self) -> String {
        let m = |f: u64| f as f64 / 2e9;
        let d = self.deviations();
        format!(
            "GMACs vs published: total {:.3} vs {PUBLISHED_TOTAL_GFLOPS} ({:+.1}%), token learners {:.3} vs {PUBLISHED_TOKEN_LEARNER_GFLOPS} ({:+.1}%), token fusers {:.3} vs {PUBLISHED_TOKEN_FUSER_GFLOPS} ({:+.1}%)",
            m(self.total),
            d[0],
            m(self.token_learn()),
            d[1],
            m(self.token_fuse()),
            d[2],
        )
    }

    /// Per-module table in GFLOPs.
    pub fn table(&self) -> String {
        let g = |f: u64| f as f64 / 1e9;
        let mut out = String::new();
        let mut line = |name: &str, f: u64| out.push_str(&format!("{name:<24}{:>12.4} GFLOPs\n", g(f)));
        line("backbone (main)", self.backbone_main);
        line("backbone (satellite)", self.backbone_satellite);
        for (i, b) in self.bti.iter().enumerate() {
            line(&format!("bti{} token learner", i + 1), b.token_learn);
            line(&format!("bti{} attention", i + 1), b.mhsa);
            line(&format!("bti{} token fuser", i + 1), b.token_fuse);
        }
        line("decoder", self.decoder);
        line("head", self.head);
        line("total", self.total);
        out
    }
}

pub fn deviation_percent(measured: f64, reference: f64) -> f64 {
    100.0 * (measured - reference) / reference
}

/// Multiply-accumulates of one convolution and its output side.
pub fn conv_macs(spec: Conv2dSpec, c_in: usize, c_out: usize, side: usize) -> (u64, usize) {
    let out = spec.out_size(side).unwrap_or(0);
    (spec.macs(1, c_in, c_out, out, out), out)
}

fn stream_macs(cfg: &StreamConfig, size: usize) -> u64 {
    let c = cfg.channels;
    let (mut total, side) = conv_macs(Conv2dSpec::new(7).stride(2).padding(3), cfg.in_channels, c[0], size);
    let mut side = PoolSpec { kernel: 3, stride: 2, padding: 1, ceil_mode: false }.out_size(side);
    let mut c_in = c[0];
    for i in 0..4 {
        for j in 0..cfg.blocks[i] {
            let stride = if i > 0 && j == 0 { 2 } else { 1 };
            let (m1, out) = conv_macs(Conv2dSpec::same(3, 1).stride(stride), c_in, c[i], side);
            let (m2, _) = conv_macs(Conv2dSpec::same(3, 1), c[i], c[i], out);
            total += m1 + m2;
            if stride != 1 || c_in != c[i] {
                total += conv_macs(Conv2dSpec::new(1).stride(stride), c_in, c[i], side).0;
            }
            c_in = c[i];
            side = out;
        }
    }
    total
}

/// Multiply-accumulates of a U-block on a `side x side` input.
pub fn rsu_macs(cfg: &RsuConfig, side: usize) -> u64 {
    let conv = |c_in, c_out, s: usize| 9 * (c_in * c_out * s * s) as u64;
    let pool = PoolSpec { kernel: 2, stride: 2, padding: 0, ceil_mode: true };
    let (mid, out) = (cfg.mid_channels, cfg.out_channels);
    let mut sides = vec![side];
    for i in 1..cfg.depth - 1 {
        let prev = sides[i - 1];
        sides.push(if cfg.dilated { prev } else { pool.out_size(prev) });
    }
    let mut total = conv(cfg.in_channels, out, side);
    for (i, &s) in sides.iter().enumerate() {
        total += conv(if i == 0 { out } else { mid }, mid, s);
        total += conv(2 * mid, if i == 0 { out } else { mid }, s);
    }
    total + conv(mid, mid, *sides.last().expect("depth >= 2"))
}

/// Analytic per-sample FLOPs of a model configuration.
pub fn count_flops(cfg: &ModelConfig) -> FlopsBreakdown {
    let s = cfg.size;
    let backbone_main = 2 * stream_macs(&cfg.main, s);
    let backbone_satellite = 2 * stream_macs(&cfg.satellite, s);
    let bti: Vec<BtiFlops> = cfg
        .bti
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let side = StreamConfig::stage_size(s, i + 1);
            let c = cfg.main.channels[i];
            let (tl, mhsa, tf) = b.macs(c, side, side);
            let attention_term = b.layers as u64 * b.attention_layer_macs(2 * c).token_mixing;
            BtiFlops { token_learn: 2 * tl, mhsa: 2 * mhsa, token_fuse: 2 * tf, attention_term: 2 * attention_term }
        })
        .collect();
    let ins = Decoder::block_in_channels(&cfg.decoder, cfg.main.channels, cfg.satellite.channels);
    let decoder: u64 = (0..4)
        .map(|k| {
            let out = cfg.decoder.out_channels[k];
            let rsu = RsuConfig {
                depth: cfg.decoder.depths[k],
                in_channels: ins[k],
                mid_channels: (out / 2).max(1),
                out_channels: out,
                dilated: k == 0 && cfg.decoder.bottleneck_dilated,
            };
            2 * rsu_macs(&rsu, StreamConfig::stage_size(s, 4 - k))
        })
        .sum();
    let head = 2 * (cfg.decoder.out_channels[3] * s * s) as u64;
    let total = backbone_main + backbone_satellite + bti.iter().map(BtiFlops::total).sum::<u64>() + decoder + head;
    FlopsBreakdown { backbone_main, backbone_satellite, bti, decoder, head, total }
}
