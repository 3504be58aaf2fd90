//! Acceptance checks, one PASS/FAIL line each. Exits non-zero on any failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use bifuser::bti::{pooled_recover, pooled_reduce, BtiConfig, MhsaStack, ReduceRecover, TokenFuser, TokenLearner};
use bifuser::config::RunConfig;
use bifuser::eval::{channel_max, export_attention, normalize_min_max, r_rule, R_THRESHOLDS};
use bifuser::imaging::{generate_synthetic, Preprocessor};
use bifuser::model::{fit, mean_error};
use bifuser::{count_flops, BiFuser, CanonicalSample, FoveaAnnotation, InputMode, ModelConfig, Point};
use bifuser_tensor::{Graph, ParamBuilder, ParamId, ParamStore, Tensor};
use common::{bti_gradcheck, model_gradcheck, rsu_gradcheck, shape_ladder, strategy_shapes, vessel_vessel_logits, GRAD_TOLERANCE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one check: pass flag and a one-line summary.
type Outcome = (bool, String);

fn run(name: &str, budget_s: f64, check: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let (ok, detail) = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
        (false, format!("panicked: {msg}"))
    });
    let secs = started.elapsed().as_secs_f64();
    let in_time = secs < budget_s;
    let pass = ok && in_time;
    println!("{} {name}: {detail}; {secs:.1}s (budget {budget_s:.0}s)", if pass { "PASS" } else { "FAIL" });
    pass
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn set(store: &mut ParamStore<f64>, id: ParamId, f: impl FnMut(usize) -> f64) {
    let shape = store.get(id).shape().to_vec();
    store.set(id, Tensor::from_fn(&shape, f)).unwrap();
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Grouped 1x1 convolution of `x` `[c, hw]`, written out directly.
fn grouped_pointwise(store: &ParamStore<f64>, w: ParamId, b: Option<ParamId>, x: &[Vec<f64>], groups: usize) -> Vec<Vec<f64>> {
    let (w, c) = (store.get(w), x.len());
    let per = c / groups;
    (0..c)
        .map(|o| {
            let g0 = (o / per) * per;
            (0..x[0].len())
                .map(|p| b.map_or(0.0, |b| store.get(b).data()[o]) + (0..per).map(|k| w.at(&[o, k, 0, 0]) * x[g0 + k][p]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn channels(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (c, hw) = (t.shape()[1], t.shape()[2] * t.shape()[3]);
    (0..c).map(|k| t.data()[k * hw..(k + 1) * hw].to_vec()).collect()
}

fn bti_oracles() -> Outcome {
    let mut worst = 0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = |n| BtiConfig { n_tokens: n, layers: 0, heads: 1, ffn_ratio: 1, strategy: ReduceRecover::Learned, feature_groups: 2 };

    // Zeroed attention logits spread every token evenly, so each token is
    // the spatial mean of the projected features.
    let mut store = ParamStore::<f64>::new();
    let tl = TokenLearner::new(&mut ParamBuilder::new(&mut store, &mut rng), 6, &cfg(4));
    set(&mut store, tl.attn2.weight, |_| 0.0);
    let x = random(&mut rng, &[1, 6, 5, 4]);
    let f = grouped_pointwise(&store, tl.feature.weight, tl.feature.bias, &channels(&x), 2);
    let mut g = Graph::eval(&store);
    let xv = g.input(x);
    let (tokens, _) = tl.forward(&mut g, xv).unwrap();
    for (c, row) in f.iter().enumerate() {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        for j in 0..4 {
            worst = worst.max((g.value(tokens).at(&[0, c, j]) - mean).abs());
        }
    }

    // Saturated logits make each attention column one-hot at a chosen
    // position, and the token equals that feature column.
    let mut store = ParamStore::<f64>::new();
    let tl = TokenLearner::new(&mut ParamBuilder::new(&mut store, &mut rng), 4, &cfg(2));
    set(&mut store, tl.attn1.weight, |i| if i == 0 || i == 5 { 1.0 } else { 0.0 });
    set(&mut store, tl.attn2.weight, |i| if i == 0 || i == 3 { 1000.0 } else { 0.0 });
    let picks = [7, 2];
    let mut x = random(&mut rng, &[1, 4, 3, 3]);
    for p in 0..9 {
        x.set(&[0, 0, p / 3, p % 3], if p == picks[0] { 1.0 } else { 0.0 });
        x.set(&[0, 1, p / 3, p % 3], if p == picks[1] { 1.0 } else { 0.0 });
    }
    let f = grouped_pointwise(&store, tl.feature.weight, tl.feature.bias, &channels(&x), 2);
    let mut g = Graph::eval(&store);
    let xv = g.input(x);
    let (tokens, sam) = tl.forward(&mut g, xv).unwrap();
    let mut one_hot = true;
    for (j, &pick) in picks.iter().enumerate() {
        one_hot &= (0..9).all(|p| g.value(sam).at(&[0, p, j]) == if p == pick { 1.0 } else { 0.0 });
        for (c, row) in f.iter().enumerate() {
            worst = worst.max((g.value(tokens).at(&[0, c, j]) - row[pick]).abs());
        }
    }

    // Token fuser against the explicit matrix product of remixed tokens and
    // the per-position sigmoid gate.
    let (c2, n, hw) = (6, 3, 12);
    let mut store = ParamStore::<f64>::new();
    let tf = TokenFuser::new(&mut ParamBuilder::new(&mut store, &mut rng), c2, &cfg(n));
    for id in [tf.token_linear.bias, tf.gate1.bias, tf.gate2.bias].into_iter().flatten() {
        set(&mut store, id, |_| rng.random_range(-0.5..0.5));
    }
    let tok = random(&mut rng, &[1, c2, n]);
    let grid = random(&mut rng, &[1, c2, 3, 4]);
    let lin = |w: &Tensor<f64>, b: &Tensor<f64>, x: &[f64]| -> Vec<f64> {
        (0..w.shape()[1]).map(|o| b.data()[o] + x.iter().enumerate().map(|(i, v)| v * w.at(&[i, o])).sum::<f64>()).collect()
    };
    let p = |id: Option<ParamId>| store.get(id.unwrap()).clone();
    let (tw, tb) = (store.get(tf.token_linear.weight).clone(), p(tf.token_linear.bias));
    let (w1, b1) = (store.get(tf.gate1.weight).clone(), p(tf.gate1.bias));
    let (w2, b2) = (store.get(tf.gate2.weight).clone(), p(tf.gate2.bias));
    let remixed: Vec<Vec<f64>> = (0..c2).map(|c| lin(&tw, &tb, &tok.data()[c * n..(c + 1) * n])).collect();
    let gates: Vec<Vec<f64>> = (0..hw)
        .map(|q| {
            let x: Vec<f64> = (0..c2).map(|c| grid.data()[c * hw + q]).collect();
            let h: Vec<f64> = lin(&w1, &b1, &x).into_iter().map(gelu).collect();
            lin(&w2, &b2, &h).into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
        })
        .collect();
    let mut g = Graph::eval(&store);
    let (tv, fv) = (g.input(tok), g.input(grid));
    let out = tf.forward(&mut g, tv, fv).unwrap();
    for c in 0..c2 {
        for q in 0..hw {
            let expect: f64 = (0..n).map(|j| remixed[c][j] * gates[q][j]).sum();
            worst = worst.max((g.value(out).data()[c * hw + q] - expect).abs());
        }
    }

    // Pooling to a coarse grid and interpolating back keeps bilinear ramps.
    let store = ParamStore::<f64>::new();
    let mut g = Graph::eval(&store);
    for (side, cells) in [(8, 2), (16, 4), (32, 8), (12, 3)] {
        let (a, b, c, d) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1e-2..1e-2));
        let ramp = Tensor::from_fn(&[1, 2, side, side], |i| {
            let (ch, y, x) = (i / (side * side), (i / side) % side, i % side);
            let (x, y) = (x as f64, y as f64);
            a * x + b * y + c * ch as f64 + d * x * y
        });
        let v = g.input(ramp.clone());
        let t = pooled_reduce(&mut g, v, cells).unwrap();
        let r = pooled_recover(&mut g, t, side, side).unwrap();
        worst = worst.max(g.value(r).max_abs_diff(&ramp).unwrap());
    }
    (worst <= 1e-6 && one_hot, format!("worst deviation {worst:.2e} (tolerance 1e-6), one-hot columns exact: {one_hot}"))
}

fn gradient_suite() -> Outcome {
    let checks = [("bti", bti_gradcheck()), ("rsu", rsu_gradcheck()), ("model", model_gradcheck(ModelConfig::tiny(64), 23))];
    let ok = checks.iter().all(|(_, (n, w))| *n >= 50 && *w < GRAD_TOLERANCE);
    let detail = checks.iter().map(|(name, (n, w))| format!("{name} {w:.2e} over {n}")).collect::<Vec<_>>().join(", ");
    (ok, format!("worst relative error {detail} (tolerance 1e-4, at least 50 each)"))
}

fn normalization_and_shapes() -> Outcome {
    let mut column = 0f64;
    for s in [256, 512] {
        match shape_ladder(ModelConfig::paper(s)) {
            Ok(w) => column = column.max(w),
            Err(e) => return (false, e),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let cfg = BtiConfig { n_tokens: 8, layers: 2, heads: 4, ffn_ratio: 2, strategy: ReduceRecover::Learned, feature_groups: 1 };
    let stack = MhsaStack::new(&mut ParamBuilder::new(&mut store, &mut rng), 16, &cfg).unwrap();
    let t = random(&mut rng, &[2, 16, 8]);
    let perm = [5, 2, 7, 0, 3, 6, 1, 4];
    let permute = |x: &Tensor<f64>| Tensor::from_fn(&[2, 16, 8], |i| x.at(&[i / 128, (i / 8) % 16, perm[i % 8]]));
    let mut g = Graph::eval(&store);
    let v = g.input(t.clone());
    let out = stack.forward(&mut g, v).unwrap();
    let out = g.value(out).clone();
    let vp = g.input(permute(&t));
    let out_p = stack.forward(&mut g, vp).unwrap();
    let equiv = g.value(out_p).max_abs_diff(&permute(&out)).unwrap();
    (
        column <= 1e-5 && equiv <= 1e-6,
        format!("attention column sums within {column:.2e} of 1 (tolerance 1e-5), shapes hold at S=256 and 512, permutation equivariance {equiv:.2e} (tolerance 1e-6)"),
    )
}

fn flops_claims() -> Outcome {
    let base = count_flops(&ModelConfig::paper(512));
    let mut dense_cfg = ModelConfig::paper(512);
    for b in &mut dense_cfg.bti {
        b.n_tokens = 1024;
    }
    let dense = count_flops(&dense_cfg);
    let ratio_exact = dense.attention_term() == 256 * base.attention_term();
    print!("{}", base.table());
    println!("{}", base.published_comparison());
    let [total, tl, tf] = base.deviations();
    let ok = ratio_exact && total.abs() <= 20.0 && tl.abs() <= 50.0 && tf.abs() <= 50.0;
    (
        ok,
        format!(
            "attention term ratio {}/{} = {} (exactly 256: {ratio_exact}), total {total:+.1}% (within 20%), token learners {tl:+.1}%, token fusers {tf:+.1}% (within 50%)",
            dense.attention_term(),
            base.attention_term(),
            dense.attention_term() as f64 / base.attention_term() as f64
        ),
    )
}

fn preset_data(rc: &RunConfig) -> Vec<CanonicalSample> {
    let cfg = rc.synthetic_config();
    let mut rng = ChaCha8Rng::seed_from_u64(rc.seed());
    let pre = Preprocessor::new(rc.size);
    (0..rc.synth_count).map(|_| pre.run(&generate_synthetic(&cfg, &mut rng).unwrap().0).unwrap()).collect()
}

fn smoke_learning() -> Outcome {
    let rc = RunConfig::preset("smoke").unwrap();
    let data = preset_data(&rc);
    let mut model = BiFuser::<f32>::new(rc.model_config(), rc.seed()).unwrap();
    let report = fit(&mut model, &data, &[], &rc.train, None).unwrap();
    let err = mean_error(&model, &data, rc.train.batch_size, rc.train.threshold).unwrap();
    let r_mask = model.config.mask_radius;
    (
        err < r_mask && report.losses.len() <= 500,
        format!("{} samples, {} steps, training mean error {err:.3} px (needs < r_mask {r_mask} px)", data.len(), report.losses.len()),
    )
}

fn desk_learning() -> Outcome {
    let rc = RunConfig::preset("desk").unwrap();
    let mut data = preset_data(&rc);
    let held = data.split_off(64);
    assert_eq!(held.len(), 16);
    let mut model = BiFuser::<f32>::new(rc.model_config(), rc.seed()).unwrap();
    fit(&mut model, &data, &[], &rc.train, None).unwrap();
    let refs: Vec<_> = held.iter().collect();
    let preds: Vec<Point> = model.predict(&refs, rc.train.threshold).unwrap().iter().map(|r| r.original).collect();
    let gts: Vec<FoveaAnnotation> = held.iter().map(|s| s.annotation.clone()).collect();
    let report = r_rule(&preds, &gts).unwrap();
    let acc = report.accuracies;
    (
        acc[2] >= 90.0,
        format!(
            "64 train, 16 held out: accuracy {:.1}/{:.1}/{:.1}/{:.1}% at R/4, R/2, R, 2R (needs >= 90% at R), mean error {:.2} px",
            acc[0], acc[1], acc[2], acc[3], report.mean_error_px
        ),
    )
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..1000 {
        let gt = Point::new(rng.random_range(0.0..2000.0), rng.random_range(0.0..2000.0));
        let r = rng.random_range(5.0..120.0);
        let (angle, dist) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..3.0 * r));
        preds.push(Point::new(gt.x + dist * angle.cos(), gt.y + dist * angle.sin()));
        gts.push(FoveaAnnotation { fovea: gt, od_radius: r, original_size: (2000, 2000) });
    }
    let report = r_rule(&preds, &gts).unwrap();
    let mut hits = [0usize; 4];
    let mut monotone = true;
    for (p, g) in preds.iter().zip(&gts) {
        let d = ((p.x - g.fovea.x).powi(2) + (p.y - g.fovea.y).powi(2)).sqrt();
        let ok = R_THRESHOLDS.map(|t| d <= t * g.od_radius);
        for (h, o) in hits.iter_mut().zip(ok) {
            *h += o as usize;
        }
        let single = r_rule(std::slice::from_ref(p), std::slice::from_ref(g)).unwrap().accuracies;
        monotone &= single.windows(2).all(|w| w[0] <= w[1]) && single == ok.map(|o| if o { 100.0 } else { 0.0 });
    }
    let brute = hits.map(|h| 100.0 * h as f64 / 1000.0);
    let gt = FoveaAnnotation { fovea: Point::new(100.0, 100.0), od_radius: 38.0, original_size: (2000, 2000) };
    let boundary = r_rule(&[Point::new(119.0, 100.0)], &[gt]).unwrap().accuracies;
    let ok = brute == report.accuracies && monotone && boundary == [0.0, 100.0, 100.0, 100.0];
    (ok, format!("1000 triples match brute force {brute:?}, monotone per case, 19 px at R=38 scores {boundary:?}"))
}

fn ablation_wiring() -> Outcome {
    let (a, b) = vessel_vessel_logits(11);
    let invariant = a.data() == b.data();
    let learned = strategy_shapes(ReduceRecover::Learned);
    let pooled = strategy_shapes(ReduceRecover::Pooled);
    let mode_ok = ModelConfig::tiny(64).with_input_mode(InputMode::VesselVessel).validate().is_ok();
    (
        invariant && learned == pooled && mode_ok,
        format!("vessel+vessel logits bitwise equal under fundus change: {invariant}, pooled shapes {pooled:?} equal learned: {}", learned == pooled),
    )
}

fn visualization_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sam = Tensor::<f64>::from_fn(&[2, 64, 5], |_| rng.random::<f64>());
    let (side, map) = channel_max(&sam, 1);
    let brute_ok = side == 8 && (0..64).all(|p| map[p] == (0..5).map(|k| sam.at(&[1, p, k])).fold(f64::NEG_INFINITY, f64::max));

    let mut hot = Tensor::<f64>::zeros(&[1, 64, 3]);
    hot.set(&[0, 27, 1], 1.0);
    let (_, mut hot_map) = channel_max(&hot, 0);
    let varied = normalize_min_max(&mut hot_map);
    let one_hot_ok = varied && hot_map.iter().enumerate().all(|(p, &v)| v == if p == 27 { 1.0 } else { 0.0 });

    let uniform = Tensor::<f64>::full(&[1, 64, 3], 1.0 / 64.0);
    let (_, mut flat) = channel_max(&uniform, 0);
    let degenerate_ok = !normalize_min_max(&mut flat) && flat.iter().all(|&v| v == 0.0);

    let dir = tempfile::tempdir().unwrap();
    let fundus = Tensor::<f32>::full(&[3, 64, 64], 0.4);
    let narrow = |t: &Tensor<f64>| Tensor::<f32>::from_fn(t.shape(), |i| t.data()[i] as f32);
    let stages = vec![narrow(&hot), narrow(&uniform)];
    let files = export_attention(&stages, 0, &fundus, "probe", dir.path()).unwrap();
    let raw = image::open(dir.path().join("probe_stage2_raw.png")).unwrap().to_luma8();
    let files_ok = files.len() == 4 && raw.pixels().all(|p| p[0] == 0);
    let ok = brute_ok && one_hot_ok && degenerate_ok && files_ok;
    (
        ok,
        format!("channel max equals brute force: {brute_ok}, one-hot marks one pixel: {one_hot_ok}, uniform map is all zero: {degenerate_ok}, files written: {files_ok}"),
    )
}

fn main() {
    let results = [
        run("bti-oracles", 10.0, bti_oracles),
        run("gradient-suite", 120.0, gradient_suite),
        run("normalization-and-shapes", 600.0, normalization_and_shapes),
        run("flops", 60.0, flops_claims),
        run("smoke-learning", 600.0, smoke_learning),
        run("desk-learning", 2700.0, desk_learning),
        run("metric-oracle", 60.0, metric_oracle),
        run("ablation-wiring", 60.0, ablation_wiring),
        run("visualization", 60.0, visualization_contract),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} acceptance checks passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
