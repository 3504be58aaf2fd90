//! Residual convolutional streams split into four stages.

use bifuser_tensor::{BatchNorm2d, Conv2d, Conv2dSpec, Graph, ParamBuilder, PoolSpec, Scalar, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{NetError, NetResult};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Basic residual blocks per stage.
    pub blocks: [usize; 4],
    pub channels: [usize; 4],
    pub in_channels: usize,
}

impl StreamConfig {
    /// 34-layer residual profile.
    pub fn resnet34(in_channels: usize) -> Self {
        Self { blocks: [3, 4, 6, 3], channels: [64, 128, 256, 512], in_channels }
    }

    /// 18-layer residual profile.
    pub fn resnet18(in_channels: usize) -> Self {
        Self { blocks: [2, 2, 2, 2], channels: [64, 128, 256, 512], in_channels }
    }

    pub fn validate(&self) -> NetResult<()> {
        if self.blocks.contains(&0) || self.channels.contains(&0) || self.in_channels == 0 {
            return Err(NetError::InvalidConfig(format!("stream {self:?} has an empty stage")));
        }
        Ok(())
    }

    /// Spatial size of stage `i` (1-based) for input size `s`.
    pub fn stage_size(s: usize, i: usize) -> usize {
        s >> (i + 1)
    }
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, spec: Conv2dSpec) -> Self {
        Self { conv: Conv2d::new(&mut b.child("conv"), c_in, c_out, spec, false), bn: BatchNorm2d::new(&mut b.child("bn"), c_out) }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> NetResult<Var> {
        let y = self.conv.forward(g, x)?;
        Ok(self.bn.forward(g, y)?)
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    downsample: Option<ConvBn>,
}

impl BasicBlock {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, stride: usize) -> Self {
        let downsample =
            (stride != 1 || c_in != c_out).then(|| ConvBn::new(&mut b.child("downsample"), c_in, c_out, Conv2dSpec::new(1).stride(stride)));
        Self {
            conv1: ConvBn::new(&mut b.child("conv1"), c_in, c_out, Conv2dSpec::same(3, 1).stride(stride)),
            conv2: ConvBn::new(&mut b.child("conv2"), c_out, c_out, Conv2dSpec::same(3, 1)),
            downsample,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> NetResult<Var> {
        let y = self.conv1.forward(g, x)?;
        let y = g.tape.relu(y);
        let y = self.conv2.forward(g, y)?;
        let skip = match &self.downsample {
            Some(d) => d.forward(g, x)?,
            None => x,
        };
        let y = g.tape.add(y, skip)?;
        Ok(g.tape.relu(y))
    }
}

/// One convolutional stream. The 7x7 stem and max-pool are part of stage 1.
#[derive(Clone, Debug)]
pub struct ResidualStream {
    pub config: StreamConfig,
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
}

impl ResidualStream {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, config: &StreamConfig) -> NetResult<Self> {
        config.validate()?;
        let c = config.channels;
        let stem = ConvBn::new(&mut b.child("stem"), config.in_channels, c[0], Conv2dSpec::new(7).stride(2).padding(3));
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let mut sb = b.child(&format!("layer{}", i + 1));
            let c_in = if i == 0 { c[0] } else { c[i - 1] };
            let stride = if i == 0 { 1 } else { 2 };
            let blocks = (0..config.blocks[i])
                .map(|j| {
                    let mut bb = sb.child(&j.to_string());
                    if j == 0 {
                        BasicBlock::new(&mut bb, c_in, c[i], stride)
                    } else {
                        BasicBlock::new(&mut bb, c[i], c[i], 1)
                    }
                })
                .collect();
            stages.push(blocks);
        }
        Ok(Self { config: config.clone(), stem, stages })
    }

    /// Runs stage `i` (1-based). Stage 1 consumes the image `[B, C_in, S, S]`
    /// and reduces by 4; later stages halve the previous stage's output.
    pub fn stage_forward<T: Scalar>(&self, g: &mut Graph<'_, T>, i: usize, x: Var) -> NetResult<Var> {
        if !(1..=4).contains(&i) {
            return Err(NetError::InvalidConfig(format!("stage index {i} outside 1..=4")));
        }
        let shape = g.shape(x).to_vec();
        let expected_c = if i == 1 { self.config.in_channels } else { self.config.channels[i - 2] };
        if shape.len() != 4 || shape[1] != expected_c {
            return Err(TensorError::ShapeMismatch {
                op: "stage input",
                expected: vec![shape.first().copied().unwrap_or(0), expected_c],
                got: shape,
            }
            .into());
        }
        let mut h = x;
        if i == 1 {
            h = self.stem.forward(g, h)?;
            h = g.tape.relu(h);
            h = g.tape.maxpool2d(h, PoolSpec { kernel: 3, stride: 2, padding: 1, ceil_mode: false })?;
        }
        for block in &self.stages[i - 1] {
            h = block.forward(g, h)?;
        }
        Ok(h)
    }
}

/// Adds the fused update back onto the stream's skip features.
pub fn residual_reinject<T: Scalar>(g: &mut Graph<'_, T>, skip: Var, fused: Var) -> NetResult<Var> {
    Ok(g.tape.add(skip, fused)?)
}
