// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{forward, numeric_gradients, relative_error, shallow_model, Params};
use introspect::train::lm_loss_and_gradients;
use introspect::{Intervention, LayerSet, ModelConfig, TokenSeq, Transformer};
use proptest::prelude::*;

fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - y).abs()).fold(0.0, f64::max)
}

fn deep_model(seed: u64) -> Transformer {
    Transformer::new(ModelConfig {
        layers: 4,
        hidden: 16,
        heads: 4,
        vocab: 21,
        context: 10,
        mlp_ratio: 4,
        seed,
        rescale_slots: false,
    })
    .unwrap()
}

#[test]
fn forward_matches_reference_on_shallow_model() {
    let m = shallow_model(3);
    let ids = [1, 4, 7, 2, 12, 0, 5];
    let trace = m.forward(&TokenSeq::new(ids.to_vec()), &LayerSet::all(2)).unwrap();
    let (hidden, logits) = forward(&Params::of(&m), &ids, &[]);
    for t in 0..ids.len() {
        assert!(max_abs_diff(trace.logits.row(t), &logits[t]) < 1e-4, "logits at {t}");
        for l in 0..2 {
            assert!(max_abs_diff(trace.at(l, t), &hidden[l][t]) < 1e-4, "h[{l}] at {t}");
        }
    }
}

#[test]
fn forward_matches_reference_on_default_init() {
    let m = deep_model(11);
    let ids = [3, 3, 20, 9, 0, 14, 8, 1, 19, 2];
    let trace = m.forward(&TokenSeq::new(ids.to_vec()), &LayerSet::all(4)).unwrap();
    let (hidden, logits) = forward(&Params::of(&m), &ids, &[]);
    for t in 0..ids.len() {
        assert!(max_abs_diff(trace.logits.row(t), &logits[t]) < 1e-4);
        assert!(max_abs_diff(trace.at(3, t), &hidden[3][t]) < 1e-4);
    }
}

#[test]
fn patched_forward_matches_reference() {
    let m = deep_model(5);
    let ids = [1, 2, 3, 4, 5, 6, 7];
    let v: Vec<f32> = (0..16).map(|i| (i as f32 - 7.5) / 4.0).collect();
    let iv = Intervention {
        layers: vec![0, 2],
        position: 4,
        vector: v.clone(),
    };
    let trace = m
        .forward_patched(&TokenSeq::new(ids.to_vec()), &LayerSet::all(4), &[iv])
        .unwrap();
    let v64: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
    let (hidden, logits) = forward(&Params::of(&m), &ids, &[(0, 4, v64.clone()), (2, 4, v64)]);
    for t in 0..ids.len() {
        assert!(max_abs_diff(trace.logits.row(t), &logits[t]) < 1e-4);
        for l in 0..4 {
            assert!(max_abs_diff(trace.at(l, t), &hidden[l][t]) < 1e-4);
        }
    }
    assert_eq!(trace.at(2, 4), v.as_slice());
}

#[test]
fn gradients_match_central_differences() {
    let m = shallow_model(7);
    let ids = [2, 9, 4, 4, 11, 1];
    let (loss, grads) = lm_loss_and_gradients(&m, &ids).unwrap();
    let p = Params::of(&m);
    assert!((f64::from(loss) - common::lm_loss(&p, &ids)).abs() < 1e-5);
    let numeric = numeric_gradients(&m, &ids, 1e-5);
    for (name, g) in m.params().names.iter().zip(&grads) {
        let analytic: Vec<f64> = g.data().iter().map(|&x| f64::from(x)).collect();
        let err = relative_error(&analytic, &numeric[name]);
        assert!(err <= 1e-4, "{name}: relative error {err:.2e}");
    }
}

#[test]
fn depth_rule_applies_to_new_but_not_new_shallow() {
    let mut cfg = deep_model(0).config().clone();
    cfg.layers = 2;
    assert!(Transformer::new(cfg.clone()).is_err());
    assert!(Transformer::new_shallow(cfg).is_ok());
}

#[test]
fn out_of_range_inputs_are_rejected() {
    let m = deep_model(0);
    assert!(m.forward(&TokenSeq::new(vec![21]), &LayerSet::none()).is_err());
    assert!(m.forward(&TokenSeq::new(vec![0; 11]), &LayerSet::none()).is_err());
    let bad = Intervention {
        layers: vec![4],
        position: 0,
        vector: vec![0.0; 16],
    };
    assert!(m.forward_patched(&TokenSeq::new(vec![1, 2]), &LayerSet::none(), &[bad]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn self_patch_is_identity(
        seed in 0u64..1000,
        ids in prop::collection::vec(0u32..21, 2..10),
        l in 0usize..4,
        pos_frac in 0.0f64..1.0,
    ) {
        let m = deep_model(seed);
        let seq = TokenSeq::new(ids.clone());
        let clean = m.forward(&seq, &LayerSet::all(4)).unwrap();
        let t = ((ids.len() - 1) as f64 * pos_frac).round() as usize;
        let iv = Intervention { layers: vec![l], position: t, vector: clean.at(l, t).to_vec() };
        let patched = m.forward_patched(&seq, &LayerSet::all(4), &[iv]).unwrap();
        for (a, b) in clean.logits.data().iter().zip(patched.logits.data()) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn patching_never_reaches_earlier_positions(
        seed in 0u64..1000,
        ids in prop::collection::vec(0u32..21, 3..10),
        l in 0usize..4,
        scale in -3.0f32..3.0,
    ) {
        let m = deep_model(seed);
        let seq = TokenSeq::new(ids.clone());
        let t = ids.len() / 2;
        let clean = m.forward(&seq, &LayerSet::all(4)).unwrap();
        let iv = Intervention { layers: vec![l], position: t, vector: vec![scale; 16] };
        let patched = m.forward_patched(&seq, &LayerSet::all(4), &[iv]).unwrap();
        for pos in 0..t {
            prop_assert_eq!(clean.logits.row(pos), patched.logits.row(pos));
        }
    }
}
