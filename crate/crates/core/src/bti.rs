//! Bilateral token incorporation: joint tokens over both streams' features,
//! refined by self-attention and mapped back onto the grid.

use bifuser_tensor::{Border, Conv2d, Conv2dSpec, Graph, LayerNorm, Linear, ParamBuilder, Scalar, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{NetError, NetResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceRecover {
    /// TokenLearner / TokenFuser.
    Learned,
    /// Average pooling to a `g x g` grid, bilinear interpolation back.
    Pooled,
}

impl std::fmt::Display for ReduceRecover {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Learned => "learned",
            Self::Pooled => "pooled",
        })
    }
}

impl std::str::FromStr for ReduceRecover {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "learned" => Ok(Self::Learned),
            "pooled" => Ok(Self::Pooled),
            _ => Err(format!("unknown reduce/recover strategy {s:?} (expected learned or pooled)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BtiConfig {
    pub n_tokens: usize,
    /// Number of self-attention encoder layers.
    pub layers: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub strategy: ReduceRecover,
    /// Groups of the point-wise feature projection in the token learner.
    pub feature_groups: usize,
}

impl Default for BtiConfig {
    fn default() -> Self {
        Self { n_tokens: 64, layers: 12, heads: 8, ffn_ratio: 4, strategy: ReduceRecover::Learned, feature_groups: 4 }
    }
}

impl BtiConfig {
    /// Checks the configuration against the concatenated channel count `c2`.
    pub fn validate(&self, c2: usize) -> NetResult<()> {
        if self.n_tokens == 0 {
            return Err(NetError::InvalidConfig("n_tokens must be at least 1".into()));
        }
        if self.heads == 0 || !c2.is_multiple_of(self.heads) {
            return Err(NetError::DimNotDivisible { dim: c2, heads: self.heads });
        }
        if self.feature_groups == 0 || !c2.is_multiple_of(self.feature_groups) {
            return Err(NetError::NotDivisible(format!("{c2} channels not divisible into {} groups", self.feature_groups)));
        }
        if self.strategy == ReduceRecover::Pooled {
            self.pooled_grid()?;
        }
        Ok(())
    }

    /// Side `g` of the pooled token grid (`n = g^2`).
    pub fn pooled_grid(&self) -> NetResult<usize> {
        let g = (self.n_tokens as f64).sqrt().round() as usize;
        if g * g != self.n_tokens {
            return Err(NetError::NotDivisible(format!("{} tokens is not a perfect square", self.n_tokens)));
        }
        Ok(g)
    }

    /// Multiply-accumulates of the token learner on one `c2 x h x w` sample.
    pub fn token_learner_macs(&self, c2: usize, h: usize, w: usize) -> u64 {
        let (n, hw) = (self.n_tokens as u64, (h * w) as u64);
        let c2 = c2 as u64;
        let attention = hw * (c2 * n + n * n);
        let features = hw * c2 * c2 / self.feature_groups as u64;
        let product = c2 * hw * n;
        attention + features + product
    }

    /// Multiply-accumulates of the encoder stack over `n` tokens of width `d`.
    /// `(token learner, attention stack, token fuser)` multiply-accumulates
    /// for one sample at a stage with `c` channels per stream.
    pub fn macs(&self, c: usize, h: usize, w: usize) -> (u64, u64, u64) {
        let c2 = 2 * c;
        match self.strategy {
            ReduceRecover::Learned => (self.token_learner_macs(c2, h, w), self.mhsa_macs(c2), self.token_fuser_macs(c2, h, w)),
            ReduceRecover::Pooled => (0, self.mhsa_macs(c2), 0),
        }
    }

    pub fn mhsa_macs(&self, d: usize) -> u64 {
        self.layers as u64 * self.attention_layer_macs(d).total()
    }

    pub fn attention_layer_macs(&self, d: usize) -> AttentionMacs {
        let (n, d) = (self.n_tokens as u64, d as u64);
        AttentionMacs { projections: 4 * n * d * d, token_mixing: 2 * n * n * d, ffn: 2 * n * d * (self.ffn_ratio as u64 * d) }
    }

    /// Multiply-accumulates of the token fuser on one `c2 x h x w` sample.
    pub fn token_fuser_macs(&self, c2: usize, h: usize, w: usize) -> u64 {
        let (n, hw, c2) = (self.n_tokens as u64, (h * w) as u64, c2 as u64);
        let token_linear = c2 * n * n;
        let gate = hw * (c2 * n + n * n);
        let product = c2 * n * hw;
        token_linear + gate + product
    }
}

/// Per-layer split of encoder multiply-accumulates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AttentionMacs {
    /// Q, K, V and output projections: `4 n d^2`.
    pub projections: u64,
    /// `Q K^T` and attention-weighted values: `2 n^2 d`.
    pub token_mixing: u64,
    pub ffn: u64,
}

impl AttentionMacs {
    pub fn total(&self) -> u64 {
        self.projections + self.token_mixing + self.ffn
    }
}

fn check_finite<T: Scalar>(g: &Graph<'_, T>, v: Var, op: &'static str) -> NetResult<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(NetError::NonFiniteInput(op))
    }
}

/// Spatial-attention tokenizer.
#[derive(Clone, Debug)]
pub struct TokenLearner {
    pub attn1: Conv2d,
    pub attn2: Conv2d,
    pub feature: Conv2d,
    pub n_tokens: usize,
}

impl TokenLearner {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, c2: usize, cfg: &BtiConfig) -> Self {
        let n = cfg.n_tokens;
        Self {
            attn1: Conv2d::new(&mut b.child("attn1"), c2, n, Conv2dSpec::new(1), true),
            attn2: Conv2d::new(&mut b.child("attn2"), n, n, Conv2dSpec::new(1), true),
            feature: Conv2d::new(&mut b.child("feature"), c2, c2, Conv2dSpec::new(1).groups(cfg.feature_groups), true),
            n_tokens: n,
        }
    }

    /// Returns tokens `[B, 2c, n]` and the attention map `[B, hw, n]`, whose
    /// columns are distributions over positions.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f_in: Var) -> NetResult<(Var, Var)> {
        check_finite(g, f_in, "token learner")?;
        let (b, c2, h, w) = g.value(f_in).dims4()?;
        let a = self.attn1.forward(g, f_in)?;
        let a = g.tape.gelu(a);
        let a = self.attn2.forward(g, a)?;
        let a = g.tape.reshape(a, &[b, self.n_tokens, h * w])?;
        let sam_t = g.tape.softmax(a)?;
        let f = self.feature.forward(g, f_in)?;
        let f = g.tape.reshape(f, &[b, c2, h * w])?;
        let tokens = g.tape.matmul(f, sam_t, false, true)?;
        let sam = g.tape.permute(sam_t, &[0, 2, 1])?;
        Ok((tokens, sam))
    }
}

/// Pre-norm transformer encoder layer over a token sequence `[B, n, d]`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub heads: usize,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, d: usize, heads: usize, ffn_ratio: usize) -> Self {
        Self {
            norm1: LayerNorm::new(&mut b.child("norm1"), d),
            qkv: Linear::new(&mut b.child("qkv"), d, 3 * d, true),
            proj: Linear::new(&mut b.child("proj"), d, d, true),
            norm2: LayerNorm::new(&mut b.child("norm2"), d),
            ffn1: Linear::new(&mut b.child("ffn1"), d, ffn_ratio * d, true),
            ffn2: Linear::new(&mut b.child("ffn2"), ffn_ratio * d, d, true),
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> NetResult<Var> {
        let (b, n, d) = g.value(x).dims3()?;
        let (hd, dh) = (self.heads, d / self.heads);
        let y = self.norm1.forward(g, x)?;
        let qkv = self.qkv.forward(g, y)?;
        let qkv = g.tape.reshape(qkv, &[b, n, 3, hd, dh])?;
        let qkv = g.tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = Vec::with_capacity(3);
        for k in 0..3 {
            let t = g.tape.narrow(qkv, 0, k, 1)?;
            parts.push(g.tape.reshape(t, &[b * hd, n, dh])?);
        }
        let q = g.tape.scale(parts[0], T::lit(1.0 / (dh as f64).sqrt()));
        let scores = g.tape.matmul(q, parts[1], false, true)?;
        let attn = g.tape.softmax(scores)?;
        let o = g.tape.matmul(attn, parts[2], false, false)?;
        let o = g.tape.reshape(o, &[b, hd, n, dh])?;
        let o = g.tape.permute(o, &[0, 2, 1, 3])?;
        let o = g.tape.reshape(o, &[b, n, d])?;
        let o = self.proj.forward(g, o)?;
        let x = g.tape.add(x, o)?;

        let y = self.norm2.forward(g, x)?;
        let y = self.ffn1.forward(g, y)?;
        let y = g.tape.gelu(y);
        let y = self.ffn2.forward(g, y)?;
        Ok(g.tape.add(x, y)?)
    }
}

#[derive(Clone, Debug)]
pub struct MhsaStack {
    pub layers: Vec<EncoderLayer>,
}

impl MhsaStack {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, d: usize, cfg: &BtiConfig) -> NetResult<Self> {
        if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
            return Err(NetError::DimNotDivisible { dim: d, heads: cfg.heads });
        }
        let layers = (0..cfg.layers).map(|i| EncoderLayer::new(&mut b.child(&i.to_string()), d, cfg.heads, cfg.ffn_ratio)).collect();
        Ok(Self { layers })
    }

    /// Tokens `[B, d, n]` in and out; the `n` tokens form the sequence axis.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var) -> NetResult<Var> {
        if self.layers.is_empty() {
            return Ok(tokens);
        }
        let mut x = g.tape.permute(tokens, &[0, 2, 1])?;
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        Ok(g.tape.permute(x, &[0, 2, 1])?)
    }
}

/// Maps tokens back onto the grid through a per-position sigmoid gate.
#[derive(Clone, Debug)]
pub struct TokenFuser {
    /// Dense layer along the token axis, `n -> n`.
    pub token_linear: Linear,
    pub gate1: Linear,
    pub gate2: Linear,
}

impl TokenFuser {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, c2: usize, cfg: &BtiConfig) -> Self {
        let n = cfg.n_tokens;
        Self {
            token_linear: Linear::new(&mut b.child("token_linear"), n, n, true),
            gate1: Linear::new(&mut b.child("gate1"), c2, n, true),
            gate2: Linear::new(&mut b.child("gate2"), n, n, true),
        }
    }

    /// Gate `[B, hw, n]` with entries in `(0, 1)`.
    pub fn gate<T: Scalar>(&self, g: &mut Graph<'_, T>, f_in: Var) -> NetResult<Var> {
        let (b, c2, h, w) = g.value(f_in).dims4()?;
        let x = g.tape.reshape(f_in, &[b, c2, h * w])?;
        let x = g.tape.permute(x, &[0, 2, 1])?;
        let x = self.gate1.forward(g, x)?;
        let x = g.tape.gelu(x);
        let x = self.gate2.forward(g, x)?;
        Ok(g.tape.sigmoid(x))
    }

    /// Tokens `[B, 2c, n]` and the grid `[B, 2c, h, w]` give `[B, 2c, h, w]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var, f_in: Var) -> NetResult<Var> {
        let shape = g.shape(f_in).to_vec();
        let (b, c2, _, _) = g.value(f_in).dims4()?;
        let ts = g.shape(tokens);
        if ts.len() != 3 || ts[0] != b || ts[1] != c2 || ts[2] != self.token_linear.d_in {
            return Err(TensorError::ShapeMismatch { op: "token fuser", expected: vec![b, c2, self.token_linear.d_in], got: ts.to_vec() }.into());
        }
        let t = self.token_linear.forward(g, tokens)?;
        let gate = self.gate(g, f_in)?;
        let out = g.tape.matmul(t, gate, false, true)?;
        Ok(g.tape.reshape(out, &shape)?)
    }
}

/// Average-pools `[B, 2c, h, w]` to `g x g` and flattens to tokens `[B, 2c, g^2]`.
pub fn pooled_reduce<T: Scalar>(g: &mut Graph<'_, T>, f_in: Var, grid: usize) -> NetResult<Var> {
    let (b, c2, h, w) = g.value(f_in).dims4()?;
    if grid == 0 || h % grid != 0 || w % grid != 0 || h / grid != w / grid {
        return Err(NetError::NotDivisible(format!("{h}x{w} grid cannot be pooled to {grid}x{grid}")));
    }
    let p = g.tape.avgpool2d(f_in, h / grid)?;
    Ok(g.tape.reshape(p, &[b, c2, grid * grid])?)
}

/// Reshapes tokens `[B, 2c, g^2]` to a `g x g` grid and interpolates to `h x w`.
pub fn pooled_recover<T: Scalar>(g: &mut Graph<'_, T>, tokens: Var, h: usize, w: usize) -> NetResult<Var> {
    let (b, c2, n) = g.value(tokens).dims3()?;
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n || grid == 0 || !h.is_multiple_of(grid) || !w.is_multiple_of(grid) {
        return Err(NetError::NotDivisible(format!("{n} tokens cannot be interpolated to {h}x{w}")));
    }
    let t = g.tape.reshape(tokens, &[b, c2, grid, grid])?;
    // A single cell has no slope to extrapolate.
    let border = if grid > 1 { Border::Extrapolate } else { Border::Clamp };
    Ok(g.tape.resize_bilinear(t, h, w, border)?)
}

/// Attention map of average pooling: each token averages one `k x k` block.
pub fn pooled_attention_map<T: Scalar>(batch: usize, h: usize, w: usize, grid: usize) -> Tensor<T> {
    let (kh, kw) = (h / grid, w / grid);
    let weight = T::one() / T::lit((kh * kw) as f64);
    let n = grid * grid;
    let mut out = Tensor::zeros(&[batch, h * w, n]);
    let data = out.data_mut();
    for bi in 0..batch {
        for y in 0..h {
            for x in 0..w {
                let token = (y / kh) * grid + x / kw;
                data[(bi * h * w + y * w + x) * n + token] = weight;
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct BtiOutput {
    /// Update for the main stream, `[B, c, h, w]`.
    pub main: Var,
    /// Update for the satellite stream, `[B, c, h, w]`.
    pub satellite: Var,
    /// Spatial attention map `[B, hw, n]`.
    pub attention: Var,
}

#[derive(Clone, Debug)]
pub struct Bti {
    pub config: BtiConfig,
    pub channels: usize,
    pub learner: Option<TokenLearner>,
    pub mhsa: MhsaStack,
    pub fuser: Option<TokenFuser>,
}

impl Bti {
    /// Module for two streams of `c` channels each.
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, c: usize, config: &BtiConfig) -> NetResult<Self> {
        let c2 = 2 * c;
        config.validate(c2)?;
        let learned = config.strategy == ReduceRecover::Learned;
        Ok(Self {
            config: config.clone(),
            channels: c,
            learner: learned.then(|| TokenLearner::new(&mut b.child("learner"), c2, config)),
            mhsa: MhsaStack::new(&mut b.child("mhsa"), c2, config)?,
            fuser: learned.then(|| TokenFuser::new(&mut b.child("fuser"), c2, config)),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, main: Var, satellite: Var) -> NetResult<BtiOutput> {
        if g.shape(main) != g.shape(satellite) {
            return Err(TensorError::ShapeMismatch { op: "bti streams", expected: g.shape(main).to_vec(), got: g.shape(satellite).to_vec() }.into());
        }
        let (b, c, h, w) = g.value(main).dims4()?;
        if c != self.channels {
            return Err(TensorError::ShapeMismatch { op: "bti channels", expected: vec![self.channels], got: vec![c] }.into());
        }
        let f_in = g.tape.concat(&[main, satellite], 1)?;
        let (tokens, attention) = match &self.learner {
            Some(learner) => learner.forward(g, f_in)?,
            None => {
                check_finite(g, f_in, "pooled reduce")?;
                let grid = self.config.pooled_grid()?;
                let tokens = pooled_reduce(g, f_in, grid)?;
                let sam = g.input(pooled_attention_map(b, h, w, grid));
                (tokens, sam)
            }
        };
        let tokens = self.mhsa.forward(g, tokens)?;
        let f_out = match &self.fuser {
            Some(fuser) => fuser.forward(g, tokens, f_in)?,
            None => pooled_recover(g, tokens, h, w)?,
        };
        let main = g.tape.narrow(f_out, 1, 0, c)?;
        let satellite = g.tape.narrow(f_out, 1, c, c)?;
        Ok(BtiOutput { main, satellite, attention })
    }

    /// Analytic multiply-accumulates for a `c x h x w` stage, per sample.
    pub fn macs(&self, h: usize, w: usize) -> (u64, u64, u64) {
        self.config.macs(self.channels, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bifuser_tensor::{ParamId, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(n: usize, layers: usize) -> BtiConfig {
        BtiConfig { n_tokens: n, layers, heads: 2, ffn_ratio: 2, strategy: ReduceRecover::Learned, feature_groups: 1 }
    }

    fn set(store: &mut ParamStore<f64>, id: ParamId, f: impl Fn(usize) -> f64) {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::from_fn(&shape, f)).unwrap();
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn attention_columns_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let tl = TokenLearner::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, &cfg(5, 0));
        let mut g = Graph::eval(&store);
        let x = g.input(random(&mut rng, &[2, 8, 4, 3]).scale(4.0));
        let (tokens, sam) = tl.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(tokens), &[2, 8, 5]);
        assert_eq!(g.shape(sam), &[2, 12, 5]);
        let s = g.value(sam);
        for b in 0..2 {
            for j in 0..5 {
                let col: f64 = (0..12).map(|p| s.at(&[b, p, j])).sum();
                assert!((col - 1.0).abs() < 1e-5);
                assert!((0..12).all(|p| s.at(&[b, p, j]) >= 0.0));
            }
        }
    }

    #[test]
    fn uniform_attention_gives_mean_of_projected_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let tl = TokenLearner::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, &cfg(3, 0));
        set(&mut store, tl.attn2.weight, |_| 0.0);
        let mut g = Graph::eval(&store);
        let xin = random(&mut rng, &[1, 4, 3, 3]);
        let x = g.input(xin);
        let (tokens, _) = tl.forward(&mut g, x).unwrap();
        let f = tl.feature.forward(&mut g, x).unwrap();
        let f = g.value(f).clone();
        for c in 0..4 {
            let mean: f64 = (0..9).map(|p| f.data()[c * 9 + p]).sum::<f64>() / 9.0;
            for j in 0..3 {
                assert!((g.value(tokens).at(&[0, c, j]) - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn one_hot_attention_selects_a_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let tl = TokenLearner::new(&mut ParamBuilder::new(&mut store, &mut rng), 2, &cfg(1, 0));
        // Logit 1000 * gelu(x0) peaks at the only position where channel 0 is set.
        set(&mut store, tl.attn1.weight, |i| if i == 0 { 1.0 } else { 0.0 });
        set(&mut store, tl.attn2.weight, |_| 1000.0);
        set(&mut store, tl.feature.weight, |i| if i == 0 || i == 3 { 1.0 } else { 0.0 });
        let xin = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0, 0.0, 0.0, 0.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let mut g = Graph::eval(&store);
        let x = g.input(xin);
        let (tokens, sam) = tl.forward(&mut g, x).unwrap();
        assert_eq!(g.value(sam).data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.value(tokens).data(), &[1.0, 5.0]);
    }

    #[test]
    fn empty_stack_is_identity_and_stack_is_token_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let c = cfg(5, 2);
        let stack = MhsaStack::new(&mut ParamBuilder::new(&mut store, &mut rng), 6, &c).unwrap();
        let empty = MhsaStack { layers: vec![] };
        let t = random(&mut rng, &[2, 6, 5]);
        let perm = [3, 0, 4, 1, 2];
        let permute = |x: &Tensor<f64>| {
            Tensor::from_fn(&[2, 6, 5], |i| {
                let (b, d, j) = (i / 30, (i / 5) % 6, i % 5);
                x.at(&[b, d, perm[j]])
            })
        };
        let mut g = Graph::eval(&store);
        let v = g.input(t.clone());
        let id = empty.forward(&mut g, v).unwrap();
        assert_eq!(g.value(id), &t);
        let out = stack.forward(&mut g, v).unwrap();
        let out = g.value(out).clone();
        assert_eq!(out.shape(), &[2, 6, 5]);
        let vp = g.input(permute(&t));
        let out_p = stack.forward(&mut g, vp).unwrap();
        assert!(g.value(out_p).max_abs_diff(&permute(&out)).unwrap() < 1e-6);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let c = BtiConfig { heads: 4, ..cfg(2, 1) };
        assert!(matches!(MhsaStack::new(&mut ParamBuilder::new(&mut store, &mut rng), 6, &c), Err(NetError::DimNotDivisible { dim: 6, heads: 4 })));
    }

    fn identity_fuser(store: &mut ParamStore<f64>, tf: &TokenFuser, n: usize, gate_bias: f64) {
        set(store, tf.token_linear.weight, |i| if i / n == i % n { 1.0 } else { 0.0 });
        set(store, tf.gate1.weight, |_| 0.0);
        set(store, tf.gate2.weight, |_| 0.0);
        set(store, tf.gate2.bias.unwrap(), |_| gate_bias);
    }

    #[test]
    fn saturated_gate_broadcasts_single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let tf = TokenFuser::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, &cfg(1, 0));
        identity_fuser(&mut store, &tf, 1, 8.0);
        let mut g = Graph::eval(&store);
        let tok = Tensor::from_vec(&[1, 4, 1], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let (t, f) = (g.input(tok.clone()), g.input(random(&mut rng, &[1, 4, 3, 3])));
        let gate = tf.gate(&mut g, f).unwrap();
        assert!(g.value(gate).data().iter().all(|&v| (0.999..1.0).contains(&v)));
        let out = tf.forward(&mut g, t, f).unwrap();
        let o = g.value(out);
        assert_eq!(o.shape(), &[1, 4, 3, 3]);
        for c in 0..4 {
            for p in 0..9 {
                assert!((o.data()[c * 9 + p] - tok.data()[c]).abs() < 1e-3 * tok.data()[c].abs().max(1.0));
            }
        }
    }

    #[test]
    fn half_gate_averages_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let tf = TokenFuser::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, &cfg(2, 0));
        identity_fuser(&mut store, &tf, 2, 0.0);
        let tok = random(&mut rng, &[1, 4, 2]);
        let mut g = Graph::eval(&store);
        let (t, f) = (g.input(tok.clone()), g.input(random(&mut rng, &[1, 4, 2, 3])));
        let out = tf.forward(&mut g, t, f).unwrap();
        // Direct product with the constant 0.5 gate.
        for c in 0..4 {
            let expect = 0.5 * tok.at(&[0, c, 0]) + 0.5 * tok.at(&[0, c, 1]);
            for p in 0..6 {
                assert!((g.value(out).data()[c * 6 + p] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooled_reduce_recover() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::eval(&store);
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let v = g.input(x.clone());
        let t = pooled_reduce(&mut g, v, 2).unwrap();
        assert_eq!(g.value(t).data(), &[2.5, 4.5, 10.5, 12.5]);

        let c = g.input(Tensor::full(&[2, 3, 8, 8], 1.25));
        let t = pooled_reduce(&mut g, c, 4).unwrap();
        assert!(g.value(t).data().iter().all(|&v| v == 1.25));
        let r = pooled_recover(&mut g, t, 8, 8).unwrap();
        assert!(g.value(r).data().iter().all(|&v| (v - 1.25).abs() < 1e-15));

        // An affine ramp survives the round trip.
        let ramp = Tensor::from_fn(&[1, 2, 8, 8], |i| {
            let (c, y, x) = (i / 64, (i / 8) % 8, i % 8);
            0.3 * x as f64 - 0.7 * y as f64 + c as f64
        });
        let v = g.input(ramp.clone());
        let t = pooled_reduce(&mut g, v, 2).unwrap();
        let r = pooled_recover(&mut g, t, 8, 8).unwrap();
        assert!(g.value(r).max_abs_diff(&ramp).unwrap() < 1e-6);

        let odd = g.input(Tensor::zeros(&[1, 1, 6, 6]));
        assert!(matches!(pooled_reduce(&mut g, odd, 4), Err(NetError::NotDivisible(_))));
    }

    #[test]
    fn pooled_attention_map_is_block_indicator() {
        let m = pooled_attention_map::<f64>(1, 4, 4, 2);
        assert_eq!(m.shape(), &[1, 16, 4]);
        assert_eq!(m.at(&[0, 5, 0]), 0.25);
        assert_eq!(m.at(&[0, 6, 1]), 0.25);
        assert_eq!(m.at(&[0, 6, 0]), 0.0);
        for j in 0..4 {
            assert!(((0..16).map(|p| m.at(&[0, p, j])).sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gate_leaves_streams_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let bti = Bti::new(&mut ParamBuilder::new(&mut store, &mut rng), 2, &cfg(3, 0)).unwrap();
        let tf = bti.fuser.clone().unwrap();
        identity_fuser(&mut store, &tf, 3, -60.0);
        let mut g = Graph::eval(&store);
        let (m, s) = (g.input(random(&mut rng, &[1, 2, 3, 3])), g.input(random(&mut rng, &[1, 2, 3, 3])));
        let out = bti.forward(&mut g, m, s).unwrap();
        let after = crate::backbone::residual_reinject(&mut g, m, out.main).unwrap();
        assert!(g.value(after).max_abs_diff(g.value(m)).unwrap() < 1e-12);
        assert!(g.value(out.satellite).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn halves_trace_back_to_their_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let bti = Bti::new(&mut ParamBuilder::new(&mut store, &mut rng), 3, &cfg(1, 0)).unwrap();
        let (tl, tf) = (bti.learner.clone().unwrap(), bti.fuser.clone().unwrap());
        set(&mut store, tl.feature.weight, |i| if i / 6 == i % 6 { 1.0 } else { 0.0 });
        identity_fuser(&mut store, &tf, 1, 60.0);
        let mut g = Graph::eval(&store);
        let (m, s) = (g.input(Tensor::full(&[1, 3, 4, 4], 1.0)), g.input(Tensor::full(&[1, 3, 4, 4], 2.0)));
        let out = bti.forward(&mut g, m, s).unwrap();
        assert!(g.value(out.main).data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(g.value(out.satellite).data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
        assert_eq!(g.shape(out.attention), &[1, 16, 1]);
    }

    #[test]
    fn analytic_macs_match_executed_macs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f32>::new();
        let c = BtiConfig { feature_groups: 2, ..cfg(4, 2) };
        let bti = Bti::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, &c).unwrap();
        let mut g = Graph::eval(&store);
        let (m, s) = (g.input(Tensor::zeros(&[1, 4, 6, 5])), g.input(Tensor::zeros(&[1, 4, 6, 5])));
        bti.forward(&mut g, m, s).unwrap();
        let (tl, mhsa, tf) = bti.macs(6, 5);
        assert_eq!(g.tape.macs(), tl + mhsa + tf);
    }

    #[test]
    fn token_mixing_term_scales_quadratically() {
        let small = BtiConfig::default().attention_layer_macs(1024);
        let big = BtiConfig { n_tokens: 1024, ..BtiConfig::default() }.attention_layer_macs(1024);
        assert_eq!(big.token_mixing, 256 * small.token_mixing);
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::<f64>::new();
        let bti = Bti::new(&mut ParamBuilder::new(&mut store, &mut rng), 2, &cfg(1, 0)).unwrap();
        let mut g = Graph::eval(&store);
        let mut bad = Tensor::zeros(&[1, 2, 2, 2]);
        bad.data_mut()[3] = f64::NAN;
        let (m, s) = (g.input(bad), g.input(Tensor::zeros(&[1, 2, 2, 2])));
        assert!(matches!(bti.forward(&mut g, m, s), Err(NetError::NonFiniteInput(_))));
    }
}
