// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use introspect::explain::{outcome_explanation, Outcome};
use introspect::metrics::{
    content_match, exact_match, has_changed_f1, mean_stderr, paired_t_test, pearson, spearman, welch_t_test,
    OutcomeRecord,
};
use introspect::world::{World, WorldConfig};
use proptest::prelude::*;

/// Two-sided p-value of Student's t by Simpson integration of the density.
fn t_two_sided(t: f64, df: f64) -> f64 {
    let ln_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let pdf = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    let n = 20_000;
    let h = t.abs() / n as f64;
    let mut s = pdf(0.0) + pdf(t.abs());
    for i in 1..n {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}

/// Lanczos approximation.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn record(changed: bool, predicted_changed: bool) -> OutcomeRecord {
    let truth = Outcome {
        changed,
        content: vec![1],
    };
    OutcomeRecord {
        id: String::new(),
        predicted: vec![],
        gold: vec![],
        parsed: Some(Outcome {
            changed: predicted_changed,
            content: vec![1],
        }),
        truth,
    }
}

#[test]
fn pearson_known_value() {
    let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0]).unwrap();
    assert!((r - 3f64.sqrt() / 2.0).abs() < 1e-6);
    assert_eq!(pearson(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).unwrap(), 0.0);
    assert!(pearson(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn spearman_uses_average_ranks() {
    // ranks [1, 2.5, 2.5, 4] vs [1, 2, 3, 4]
    let r = spearman(&[1.0, 2.0, 2.0, 5.0], &[10.0, 20.0, 30.0, 40.0]).unwrap();
    let expected = common::pearson(&[1.0, 2.5, 2.5, 4.0], &[1.0, 2.0, 3.0, 4.0]);
    assert!((r - expected).abs() < 1e-6);
}

#[test]
fn always_changed_on_balanced_set_scores_one_third() {
    let mut recs: Vec<OutcomeRecord> = (0..10).map(|_| record(true, true)).collect();
    recs.extend((0..10).map(|_| record(false, true)));
    assert!((has_changed_f1(&recs) - 1.0 / 3.0).abs() < 1e-12);
    let perfect: Vec<OutcomeRecord> = (0..10).map(|i| record(i % 2 == 0, i % 2 == 0)).collect();
    assert_eq!(has_changed_f1(&perfect), 1.0);
}

#[test]
fn mean_stderr_known_values() {
    let (m, se) = mean_stderr(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
    assert_eq!(m, 5.0);
    // sample variance 32/7
    assert!((se - (32.0f64 / 7.0 / 8.0).sqrt()).abs() < 1e-12);
}

#[test]
fn paired_t_matches_reference() {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [2.0; 5];
    let r = paired_t_test(&a, &b).unwrap();
    assert!((r.t - 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(r.df, 4.0);
    assert!((r.p - t_two_sided(r.t, 4.0)).abs() < 1e-6, "{} vs {}", r.p, t_two_sided(r.t, 4.0));
}

#[test]
fn welch_t_matches_reference() {
    let a = [0.8, 0.9, 0.7, 1.0, 0.95, 0.85];
    let b = [0.5, 0.7, 0.4, 0.9, 0.6, 0.55, 0.65, 0.3];
    let r = welch_t_test(&a, &b).unwrap();
    let (ma, sa) = mean_stderr(&a);
    let (mb, sb) = mean_stderr(&b);
    let t = (ma - mb) / (sa * sa + sb * sb).sqrt();
    let df = (sa * sa + sb * sb).powi(2) / (sa.powi(4) / 5.0 + sb.powi(4) / 7.0);
    assert!((r.t - t).abs() < 1e-12);
    assert!((r.df - df).abs() < 1e-9);
    assert!((r.p - t_two_sided(t, df)).abs() < 1e-6);
}

fn outcome_strategy() -> impl Strategy<Value = (bool, Vec<u32>)> {
    (any::<bool>(), prop::collection::vec(0usize..10, 1..3))
        .prop_map(|(c, ds)| (c, ds.into_iter().map(|d| d as u32).collect()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_never_exceeds_content(
        pairs in prop::collection::vec((outcome_strategy(), outcome_strategy(), any::<bool>()), 1..20)
    ) {
        let w = World::generate(&WorldConfig::default()).unwrap();
        let v = &w.vocab;
        let digits = |ds: &[u32]| ds.iter().map(|&d| v.digit(d as usize)).collect::<Vec<_>>();
        let recs: Vec<OutcomeRecord> = pairs
            .iter()
            .enumerate()
            .map(|(i, ((gc, gd), (pc, pd), copy))| {
                let gold = outcome_explanation(v, &Outcome { changed: *gc, content: digits(gd) });
                let predicted = if *copy {
                    gold.clone()
                } else {
                    outcome_explanation(v, &Outcome { changed: *pc, content: digits(pd) })
                };
                OutcomeRecord::new(v, i.to_string(), predicted, gold).unwrap()
            })
            .collect();
        let exact = exact_match(&recs, v.eos());
        let content = content_match(&recs);
        prop_assert!(exact <= content + 1e-12);
        let f1 = has_changed_f1(&recs);
        prop_assert!((0.0..=1.0).contains(&f1));
    }

    #[test]
    fn pearson_is_bounded_and_symmetric(
        xs in prop::collection::vec((-10.0f32..10.0, -10.0f32..10.0), 2..30)
    ) {
        let (a, b): (Vec<f32>, Vec<f32>) = xs.into_iter().unzip();
        let r = pearson(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!((r - pearson(&b, &a).unwrap()).abs() < 1e-12);
        let a64: Vec<f64> = a.iter().map(|&x| f64::from(x)).collect();
        let b64: Vec<f64> = b.iter().map(|&x| f64::from(x)).collect();
        prop_assert!((r - common::pearson(&a64, &b64)).abs() < 1e-9);
    }
}
