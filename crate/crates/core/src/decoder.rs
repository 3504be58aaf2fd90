//! Residual U-block decoder producing a full-resolution logit map.

use bifuser_tensor::{BatchNorm2d, Border, Conv2d, Conv2dSpec, Graph, ParamBuilder, PoolSpec, Scalar, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{NetError, NetResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RsuConfig {
    /// Number of U levels `L` (at least 2).
    pub depth: usize,
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    /// Grow dilation instead of pooling.
    pub dilated: bool,
}

impl RsuConfig {
    pub fn min_size(&self) -> usize {
        if self.dilated {
            1
        } else {
            1 << (self.depth - 1)
        }
    }
}

/// 3x3 convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, dilation: usize) -> Self {
        Self {
            conv: Conv2d::new(&mut b.child("conv"), c_in, c_out, Conv2dSpec::same(3, dilation), true),
            bn: BatchNorm2d::new(&mut b.child("bn"), c_out),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> NetResult<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.tape.relu(y))
    }
}

/// Residual U-block: an input projection plus a small U-net on top of it.
#[derive(Clone, Debug)]
pub struct Rsu {
    pub config: RsuConfig,
    pub input: ConvBnRelu,
    /// Encoder levels `1..L-1`.
    pub encoders: Vec<ConvBnRelu>,
    pub bottom: ConvBnRelu,
    /// Decoder levels, `decoders[i]` pairs with `encoders[i]`.
    pub decoders: Vec<ConvBnRelu>,
}

impl Rsu {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, config: RsuConfig) -> NetResult<Self> {
        if config.depth < 2 || config.mid_channels == 0 || config.out_channels == 0 {
            return Err(NetError::InvalidConfig(format!("U-block {config:?} needs depth >= 2 and non-zero widths")));
        }
        let l = config.depth;
        let (mid, out) = (config.mid_channels, config.out_channels);
        let dil = |i: usize| if config.dilated { 1 << i } else { 1 };
        let input = ConvBnRelu::new(&mut b.child("input"), config.in_channels, out, 1);
        let encoders =
            (0..l - 1).map(|i| ConvBnRelu::new(&mut b.child(&format!("enc{}", i + 1)), if i == 0 { out } else { mid }, mid, dil(i))).collect();
        let bottom_dilation = if config.dilated { 1 << (l - 1) } else { 2 };
        let bottom = ConvBnRelu::new(&mut b.child("bottom"), mid, mid, bottom_dilation);
        let decoders =
            (0..l - 1).map(|i| ConvBnRelu::new(&mut b.child(&format!("dec{}", i + 1)), 2 * mid, if i == 0 { out } else { mid }, dil(i))).collect();
        Ok(Self { config, input, encoders, bottom, decoders })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> NetResult<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.config.in_channels {
            return Err(TensorError::ShapeMismatch { op: "U-block input", expected: vec![self.config.in_channels], got: vec![c] }.into());
        }
        let min = self.config.min_size();
        if h.min(w) < min {
            return Err(NetError::TooSmallForDepth { depth: self.config.depth, min, got: h.min(w) });
        }
        let pool = PoolSpec { kernel: 2, stride: 2, padding: 0, ceil_mode: true };
        let hxin = self.input.forward(g, x)?;
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h_cur = hxin;
        for (i, enc) in self.encoders.iter().enumerate() {
            if i > 0 && !self.config.dilated {
                h_cur = g.tape.maxpool2d(h_cur, pool)?;
            }
            h_cur = enc.forward(g, h_cur)?;
            skips.push(h_cur);
        }
        let mut d = self.bottom.forward(g, h_cur)?;
        for (i, dec) in self.decoders.iter().enumerate().rev() {
            let skip = skips[i];
            let (sh, sw) = (g.shape(skip)[2], g.shape(skip)[3]);
            if g.shape(d)[2] != sh || g.shape(d)[3] != sw {
                d = g.tape.resize_bilinear(d, sh, sw, Border::Clamp)?;
            }
            let cat = g.tape.concat(&[d, skip], 1)?;
            d = dec.forward(g, cat)?;
        }
        Ok(g.tape.add(d, hxin)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Output channels of blocks B4, B3, B2, B1.
    pub out_channels: [usize; 4],
    /// U depths of blocks B4, B3, B2, B1.
    pub depths: [usize; 4],
    /// Whether the bottleneck block B4 uses dilation instead of pooling.
    pub bottleneck_dilated: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { out_channels: [256, 256, 128, 64], depths: [4, 4, 5, 6], bottleneck_dilated: true }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    /// Blocks B4, B3, B2, B1.
    pub blocks: Vec<Rsu>,
    pub head: Conv2d,
}

impl Decoder {
    /// Input channels of blocks B4..B1 given per-stage stream widths.
    pub fn block_in_channels(config: &DecoderConfig, main: [usize; 4], satellite: [usize; 4]) -> [usize; 4] {
        let mut out = [0; 4];
        for (k, o) in out.iter_mut().enumerate() {
            let stage = 3 - k;
            *o = main[stage] + satellite[stage] + if k == 0 { 0 } else { config.out_channels[k - 1] };
        }
        out
    }

    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, config: &DecoderConfig, main: [usize; 4], satellite: [usize; 4]) -> NetResult<Self> {
        let ins = Self::block_in_channels(config, main, satellite);
        let mut blocks = Vec::with_capacity(4);
        for k in 0..4 {
            let out = config.out_channels[k];
            let rsu = RsuConfig {
                depth: config.depths[k],
                in_channels: ins[k],
                mid_channels: (out / 2).max(1),
                out_channels: out,
                dilated: k == 0 && config.bottleneck_dilated,
            };
            blocks.push(Rsu::new(&mut b.child(&format!("b{}", 4 - k)), rsu)?);
        }
        let head = Conv2d::new(&mut b.child("head"), config.out_channels[3], 1, Conv2dSpec::new(1), true);
        Ok(Self { config: config.clone(), blocks, head })
    }

    /// `skips[i]` holds the fused (main, satellite) features of stage `i + 1`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, skips: &[(Var, Var); 4], size: usize) -> NetResult<Var> {
        let mut prev: Option<Var> = None;
        for (k, block) in self.blocks.iter().enumerate() {
            let (m, s) = skips[3 - k];
            let (h, w) = (g.shape(m)[2], g.shape(m)[3]);
            let mut parts = vec![m, s];
            if let Some(p) = prev {
                parts.push(g.tape.resize_bilinear(p, h, w, Border::Clamp)?);
            }
            let x = g.tape.concat(&parts, 1)?;
            prev = Some(block.forward(g, x)?);
        }
        let y = g.tape.resize_bilinear(prev.expect("four blocks"), size, size, Border::Clamp)?;
        Ok(self.head.forward(g, y)?)
    }
}
