#![allow(dead_code)]

use std::sync::Arc;

use bifuser::bti::{Bti, BtiConfig, ReduceRecover};
use bifuser::decoder::{Rsu, RsuConfig};
use bifuser::imaging::{generate_synthetic, Preprocessor, SyntheticConfig};
use bifuser::model::{loss, BiFuser, InputMode, ModelConfig};
use bifuser::CanonicalSample;
use bifuser_tensor::{Graph, ParamBuilder, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradient magnitude below which the error is measured absolutely; central
/// differences of the loss carry roundoff near `1e-10`.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Finite-difference steps. Tiny batches put thousands of ReLU and max-pool
/// inputs within reach of any single step, so each element keeps the step
/// that best agrees; a backpropagation error shows at every step.
pub const STEPS: [f64; 4] = [1e-5, 1e-6, 1e-7, 1e-8];

/// Worst relative error between central differences and backpropagated
/// parameter gradients over `samples`
/// elements spread across all trainable tensors. The loss is evaluated with
/// training-mode normalization.
pub fn param_gradcheck(store: &mut ParamStore<f64>, samples: usize, loss: &dyn Fn(&mut Graph<'_, f64>) -> Var) -> (usize, f64) {
    let ids: Vec<ParamId> = store.trainable().collect();
    let analytic: Vec<(ParamId, usize, f64)> = {
        let mut g = Graph::train(store);
        let l = loss(&mut g);
        let grads = g.tape.backward(l).unwrap();
        (0..samples)
            .map(|k| {
                let id = ids[k * ids.len() / samples];
                let n = store.get(id).numel();
                let i = (k * 7919 + 13) % n;
                let a = grads.param(id).map_or(0.0, |t| t.data()[i]);
                (id, i, a)
            })
            .collect()
    };
    let eval = |store: &ParamStore<f64>| {
        let mut g = Graph::with_mode(store, true, false);
        let l = loss(&mut g);
        g.value(l).data()[0]
    };
    let mut worst = 0f64;
    for &(id, i, a) in &analytic {
        let orig = store.get(id).data()[i];
        let mut best = (f64::INFINITY, 0.0);
        for h in STEPS {
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store);
            let numeric = (plus - minus) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if err < best.0 {
                best = (err, numeric);
            }
        }
        store.get_mut(id).data_mut()[i] = orig;
        let (err, numeric) = best;
        if std::env::var_os("GRADCHECK_VERBOSE").is_some() && err > 1e-5 {
            eprintln!("{} [{i}]: analytic {a:e} numeric {numeric:e} err {err:e}", store.entry(id).name);
        }
        worst = worst.max(err);
    }
    (analytic.len(), worst)
}

/// `count` synthetic samples generated at, and preprocessed to, `size`.
pub fn synthetic_samples(count: usize, size: usize, seed: u64) -> Vec<CanonicalSample> {
    let cfg = SyntheticConfig::new(size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pre = Preprocessor::new(size);
    (0..count)
        .map(|i| {
            let (raw, _) = generate_synthetic(&cfg, &mut rng).unwrap();
            let mut s = pre.run(&raw).unwrap();
            s.id = format!("synth_{i:04}");
            s
        })
        .collect()
}

/// Uniform noise in `[-1, 1)`.
pub fn noise<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-1.0..1.0)))
}

/// Runs the model in eval mode on noise at its canonical size and checks the
/// output and attention shapes. Returns the worst deviation of an attention
/// column sum from one.
pub fn shape_ladder(cfg: ModelConfig) -> Result<f64, String> {
    let s = cfg.size;
    let model = BiFuser::<f32>::new(cfg, 1).map_err(|e| e.to_string())?;
    let mut g = Graph::eval(&model.store);
    let f = g.input(noise(&[1, 3, s, s], 2));
    let v = g.input(noise(&[1, 1, s, s], 3));
    let out = model.forward(&mut g, f, v).map_err(|e| e.to_string())?;
    if g.shape(out.logits) != [1, 1, s, s] {
        return Err(format!("logits {:?} at S={s}", g.shape(out.logits)));
    }
    let mut worst = 0f64;
    for (i, &a) in out.attention.iter().enumerate() {
        let side = model.config.stage_size(i + 1);
        let n = model.config.bti[i].n_tokens;
        if side != s >> (i + 2) || g.shape(a) != [1, side * side, n] {
            return Err(format!("stage {} attention {:?} at S={s}", i + 1, g.shape(a)));
        }
        let sam = g.value(a);
        for j in 0..n {
            let col: f64 = (0..side * side).map(|p| sam.at(&[0, p, j]) as f64).sum();
            worst = worst.max((col - 1.0).abs());
        }
    }
    Ok(worst)
}

/// Logits of a vessel+vessel model for two different fundus inputs with the
/// same vessel map.
pub fn vessel_vessel_logits(seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let cfg = ModelConfig::tiny(64).with_input_mode(InputMode::VesselVessel);
    let model = BiFuser::<f32>::new(cfg, seed).unwrap();
    let vessel = noise::<f32>(&[2, 1, 64, 64], seed + 1);
    let run = |fundus: Tensor<f32>| {
        let mut g = Graph::eval(&model.store);
        let (f, v) = (g.input(fundus), g.input(vessel.clone()));
        let out = model.forward(&mut g, f, v).unwrap();
        g.value(out.logits).clone()
    };
    (run(noise(&[2, 3, 64, 64], seed + 2)), run(noise::<f32>(&[2, 3, 64, 64], seed + 3).scale(100.0)))
}

/// Output and attention shapes of the learned and pooled strategies on the
/// same input.
pub fn strategy_shapes(strategy: ReduceRecover) -> Vec<Vec<usize>> {
    let model = BiFuser::<f32>::new(ModelConfig::tiny(128).with_strategy(strategy), 4).unwrap();
    let mut g = Graph::eval(&model.store);
    let f = g.input(noise(&[1, 3, 128, 128], 5));
    let v = g.input(noise(&[1, 1, 128, 128], 6));
    let out = model.forward(&mut g, f, v).unwrap();
    std::iter::once(out.logits).chain(out.attention).map(|a| g.shape(a).to_vec()).collect()
}

/// Tolerance on the worst relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn probe(g: &mut Graph<'_, f64>, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i * 37 % 19) as f64 - 9.0) / 7.0);
    g.tape.dot_const(v, Arc::new(w)).unwrap()
}

/// Gradient check of a two-channel fusion module on a 4x4 grid.
pub fn bti_gradcheck() -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let cfg = BtiConfig { n_tokens: 3, layers: 1, heads: 2, ffn_ratio: 2, strategy: ReduceRecover::Learned, feature_groups: 4 };
    let bti = Bti::new(&mut ParamBuilder::new(&mut store, &mut rng).child("bti"), 2, &cfg).unwrap();
    let (main, sat) = (random(&mut rng, &[2, 2, 4, 4]), random(&mut rng, &[2, 2, 4, 4]));
    param_gradcheck(&mut store, 60, &|g| {
        let (m, s) = (g.input(main.clone()), g.input(sat.clone()));
        let out = bti.forward(g, m, s).unwrap();
        let (a, b) = (probe(g, out.main), probe(g, out.satellite));
        g.tape.add(a, b).unwrap()
    })
}

/// Gradient check of a depth-3 U-block on an 8x8 input.
pub fn rsu_gradcheck() -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut store = ParamStore::new();
    let cfg = RsuConfig { depth: 3, in_channels: 3, mid_channels: 2, out_channels: 4, dilated: false };
    let rsu = Rsu::new(&mut ParamBuilder::new(&mut store, &mut rng).child("rsu"), cfg).unwrap();
    let x = random(&mut rng, &[2, 3, 8, 8]);
    param_gradcheck(&mut store, 60, &|g| {
        let v = g.input(x.clone());
        let y = rsu.forward(g, v).unwrap();
        probe(g, y)
    })
}

/// End-to-end gradient check of the training loss on two 64x64 synthetic
/// samples. Synthetic images have exactly constant backgrounds, which park
/// pooling windows on ties and activations on kinks where finite differences
/// are meaningless; a 1e-3 jitter moves the check off those points.
pub fn model_gradcheck(cfg: ModelConfig, seed: u64) -> (usize, f64) {
    let samples = synthetic_samples(2, 64, seed);
    let mut model = BiFuser::<f64>::new(cfg, seed).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let mut batch = model.batch(&refs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in [&mut batch.fundus, &mut batch.vessel] {
        let jitter = random(&mut rng, t.shape());
        for (v, e) in t.data_mut().iter_mut().zip(jitter.data()) {
            *v += 1e-3 * e;
        }
    }
    let mut store = std::mem::take(&mut model.store);
    param_gradcheck(&mut store, 80, &|g| {
        let out = model.forward_batch(g, &batch).unwrap();
        loss(g, out.logits, batch.mask.clone()).unwrap()
    })
}
