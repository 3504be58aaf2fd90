//! Whole-model shape, normalization and ablation-wiring properties.

mod common;

use std::time::Instant;

use bifuser::bti::ReduceRecover;
use bifuser::ModelConfig;
use common::{shape_ladder, strategy_shapes, vessel_vessel_logits};

#[test]
fn full_model_shape_ladder() {
    for s in [256, 512] {
        let started = Instant::now();
        let worst = shape_ladder(ModelConfig::paper(s)).unwrap();
        println!("S={s}: worst column deviation {worst:e} in {:.1}s", started.elapsed().as_secs_f64());
        assert!(worst <= 1e-5);
    }
}

#[test]
fn vessel_vessel_ignores_fundus() {
    let (a, b) = vessel_vessel_logits(11);
    assert_eq!(a.data(), b.data());
}

#[test]
fn pooled_strategy_keeps_shapes() {
    let learned = strategy_shapes(ReduceRecover::Learned);
    assert_eq!(learned, strategy_shapes(ReduceRecover::Pooled));
    assert_eq!(learned[0], [1, 1, 128, 128]);
    assert_eq!(learned[1], [1, 32 * 32, 4]);
}
