// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeSet;

use common::brute_force_label;
use introspect::describe::{label_features, simulator_score, LabelingCorpus};
use introspect::labels::Grammar;
use introspect::metrics::LexicalJudge;
use introspect::sae::{FeatureDirection, Source};
use introspect::world::{World, WorldConfig};
use introspect::{ModelConfig, Transformer};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(corpus: usize) -> (World, Grammar, Vec<Vec<u32>>) {
    let w = World::generate(&WorldConfig::default()).unwrap();
    let g = Grammar::build(&w.vocab);
    let c = w.eval_corpus(corpus);
    (w, g, c)
}

#[test]
fn planted_label_is_recovered_with_score_one() {
    let (_, g, corpus) = setup(40);
    let lc = LabelingCorpus::new(&g, corpus.clone()).unwrap();
    let all: Vec<usize> = (0..g.len()).collect();
    let present: Vec<usize> = (0..g.len()).filter(|&k| !g.extension(k, &corpus).unwrap().is_empty()).collect();
    assert!(present.len() > 5);
    for &k in present.iter().step_by(present.len() / 5) {
        let acts: Vec<Vec<f32>> = corpus
            .iter()
            .map(|x| g.simulate(k, x).unwrap().iter().map(|a| 2.5 * a - 0.3).collect())
            .collect();
        let (oracle, top, _) = brute_force_label(&g, &corpus, &acts);
        let (best, score) = lc.best(&acts, &all).unwrap();
        assert_eq!(best, oracle);
        assert!((score - top).abs() < 1e-9);
        // Labels with the same extension on this corpus tie; the winner
        // must at least share k's extension.
        assert_eq!(g.extension(best, &corpus).unwrap(), g.extension(k, &corpus).unwrap());
    }
}

#[test]
fn simulator_score_matches_reference() {
    let (_, g, corpus) = setup(20);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let acts: Vec<Vec<f32>> = corpus.iter().map(|x| x.iter().map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    for label in [0, 5, 17] {
        let members = &g.labels()[label].members;
        let expected: f64 = corpus
            .iter()
            .zip(&acts)
            .map(|(x, a)| {
                let ind: Vec<f64> = x.iter().map(|t| f64::from(u8::from(members.contains(t)))).collect();
                common::pearson(&a.iter().map(|&v| f64::from(v)).collect::<Vec<_>>(), &ind)
            })
            .sum::<f64>()
            / corpus.len() as f64;
        assert!((simulator_score(&g, label, &acts, &corpus).unwrap() - expected).abs() < 1e-6);
    }
}

#[test]
fn label_features_agree_with_brute_force_on_model_directions() {
    let (w, g, corpus) = setup(24);
    let model = Transformer::new(ModelConfig {
        layers: 4,
        hidden: 16,
        heads: 4,
        vocab: w.vocab.len(),
        context: w.max_len().max(16),
        mlp_ratio: 2,
        seed: 9,
        rescale_slots: false,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let features: Vec<FeatureDirection> = (0..6)
        .map(|i| FeatureDirection {
            id: format!("f{i}"),
            layer: i % 4,
            source: Source::Sae,
            vector: (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect();
    let lc = LabelingCorpus::new(&g, corpus.clone()).unwrap();
    let labeled = label_features(&model, &features, &lc).unwrap();
    for (f, lf) in features.iter().zip(&labeled) {
        let taps = introspect::sae::layer_taps(&model, &corpus, f.layer).unwrap();
        let acts = introspect::sae::activation_series(&taps, &f.vector);
        let (oracle, top, second) = brute_force_label(&g, &corpus, &acts);
        assert!((lf.score - top).abs() < 1e-6, "{}: {} vs {top}", f.id, lf.score);
        if top - second > 1e-6 {
            assert_eq!(lf.label, oracle);
        }
    }
}

#[test]
fn judge_follows_its_rules_on_every_label_pair() {
    let (_, g, corpus) = setup(60);
    let judge = LexicalJudge::new(&g, &corpus).unwrap();
    let ext: Vec<BTreeSet<(usize, usize)>> = g
        .labels()
        .iter()
        .map(|l| {
            let mut s = BTreeSet::new();
            for (i, x) in corpus.iter().enumerate() {
                for (t, tok) in x.iter().enumerate() {
                    if l.members.contains(tok) {
                        s.insert((i, t));
                    }
                }
            }
            s
        })
        .collect();
    let mut seen_half = false;
    for p in 0..g.len() {
        for q in 0..g.len() {
            let inter = ext[p].intersection(&ext[q]).count() as f64;
            let union = (ext[p].len() + ext[q].len()) as f64 - inter;
            let j = if union == 0.0 { 0.0 } else { inter / union };
            let expected = if p == q {
                1.0
            } else if g.labels()[p].family == g.labels()[q].family {
                0.75
            } else if j >= 0.5 {
                0.5
            } else if j > 0.0 {
                0.25
            } else {
                0.0
            };
            seen_half |= expected == 0.5;
            assert_eq!(judge.score_ids(p, q), expected, "{} vs {}", g.labels()[p].text, g.labels()[q].text);
        }
    }
    assert!(seen_half, "corpus should contain a cross-family pair with Jaccard >= 0.5");
}

#[test]
fn judge_scores_unparseable_predictions_zero() {
    let (w, g, corpus) = setup(10);
    let judge = LexicalJudge::new(&g, &corpus).unwrap();
    let gold = &g.labels()[0].tokens;
    assert_eq!(judge.score(gold, gold), 1.0);
    assert_eq!(judge.score(&[w.vocab.eos(), w.vocab.eos()], gold), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn best_matches_exhaustive_search(seed in 0u64..10_000, subset in 2usize..40) {
        let (_, g, corpus) = setup(12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let acts: Vec<Vec<f32>> = corpus
            .iter()
            .map(|x| x.iter().map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let lc = LabelingCorpus::new(&g, corpus.clone()).unwrap();
        let all: Vec<usize> = (0..g.len()).collect();
        let (best, score) = lc.best(&acts, &all).unwrap();
        let (oracle, top, second) = brute_force_label(&g, &corpus, &acts);
        prop_assert!((score - top).abs() < 1e-6);
        if top - second > 1e-6 {
            prop_assert_eq!(best, oracle);
        }
        // Restricting the candidates never raises the score.
        let few: Vec<usize> = (0..subset.min(g.len())).collect();
        let (_, s_few) = lc.best(&acts, &few).unwrap();
        prop_assert!(s_few <= score + 1e-12);
    }
}
