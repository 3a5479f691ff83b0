// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scoring: correlations, the lexical judge, outcome metrics, paired
//! t-tests, activation-alignment measures and score reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::explain::{parse_outcome, Outcome};
use crate::labels::Grammar;
use crate::model::{LayerSet, TokenSeq, Transformer};
use crate::projection::ProjectionSet;
use crate::tensor::dot;
use crate::vocab::Vocab;

/// Pearson correlation; 0 when either series has zero variance.
pub fn pearson(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "series lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Ok(0.0);
    }
    let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // relative threshold so rounding noise in a constant series counts as constant
    let scale_a = a.iter().map(|&x| (x as f64).abs()).fold(0.0, f64::max).max(1e-30);
    let scale_b = b.iter().map(|&x| (x as f64).abs()).fold(0.0, f64::max).max(1e-30);
    if saa <= 1e-12 * scale_a * scale_a * n as f64 || sbb <= 1e-12 * scale_b * scale_b * n as f64 {
        return Ok(0.0);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    let ra: Vec<f32> = ranks(a).into_iter().map(|r| r as f32).collect();
    let rb: Vec<f32> = ranks(b).into_iter().map(|r| r as f32).collect();
    pearson(&ra, &rb)
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Mean and standard error (sample std / sqrt n).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub mean_diff: f64,
}

/// Two-sided paired t-test of `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape(format!(
            "paired t-test needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, se) = mean_stderr(&d);
    let df = (d.len() - 1) as f64;
    if se <= 1e-15 * mean.abs().max(1e-300) || se == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, df, p: 1.0, mean_diff: 0.0 }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                df,
                p: 0.0,
                mean_diff: mean,
            }
        });
    }
    let t = mean / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Config(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest { t, df, p, mean_diff: mean })
}

/// Two-sided Welch t-test of `mean(a) - mean(b)` for unpaired samples.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Shape(format!(
            "Welch t-test needs two samples of size >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, sa) = mean_stderr(a);
    let (mb, sb) = mean_stderr(b);
    let (va, vb) = (sa * sa, sb * sb);
    let diff = ma - mb;
    let se = (va + vb).sqrt();
    if se == 0.0 {
        let p = if diff == 0.0 { 1.0 } else { 0.0 };
        let t = if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY };
        return Ok(TTest { t, df: (a.len() + b.len() - 2) as f64, p, mean_diff: diff });
    }
    let df = (va + vb).powi(2) / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    let t = diff / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Config(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest { t, df, p, mean_diff: diff })
}

/// Deterministic stand-in for an LM judge on the 0..1 scale.
pub struct LexicalJudge<'g> {
    grammar: &'g Grammar,
    extensions: Vec<BTreeSet<(usize, usize)>>,
}

impl<'g> LexicalJudge<'g> {
    /// Label extensions are taken over `corpus`.
    pub fn new(grammar: &'g Grammar, corpus: &[Vec<u32>]) -> Result<Self> {
        let extensions = (0..grammar.len())
            .map(|id| grammar.extension(id, corpus))
            .collect::<Result<_>>()?;
        Ok(Self { grammar, extensions })
    }

    pub fn jaccard(&self, a: usize, b: usize) -> f64 {
        let (ea, eb) = (&self.extensions[a], &self.extensions[b]);
        let inter = ea.intersection(eb).count();
        let union = ea.len() + eb.len() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// 1 exact, 0.75 same family, 0.5 Jaccard >= 0.5, 0.25 any overlap.
    /// Predictions outside the grammar score 0.
    pub fn score(&self, predicted: &[u32], gold: &[u32]) -> f64 {
        if predicted == gold {
            return 1.0;
        }
        let (Some(p), Some(g)) = (self.grammar.parse(predicted), self.grammar.parse(gold)) else {
            return 0.0;
        };
        self.score_ids(p, g)
    }

    pub fn score_ids(&self, p: usize, g: usize) -> f64 {
        if p == g {
            return 1.0;
        }
        let labels = self.grammar.labels();
        if labels[p].family == labels[g].family {
            return 0.75;
        }
        let j = self.jaccard(p, g);
        if j >= 0.5 {
            0.5
        } else if j > 0.0 {
            0.25
        } else {
            0.0
        }
    }
}

/// A predicted and a gold outcome explanation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub id: String,
    pub predicted: Vec<u32>,
    pub gold: Vec<u32>,
    pub parsed: Option<Outcome>,
    pub truth: Outcome,
}

impl OutcomeRecord {
    pub fn new(vocab: &Vocab, id: String, predicted: Vec<u32>, gold: Vec<u32>) -> Result<Self> {
        let truth = parse_outcome(vocab, &gold)
            .ok_or_else(|| Error::Format(format!("gold explanation of {id} does not parse")))?;
        let parsed = parse_outcome(vocab, &predicted);
        Ok(Self {
            id,
            predicted,
            gold,
            parsed,
            truth,
        })
    }

    fn trimmed_eq(&self, vocab_eos: u32) -> bool {
        let strip = |s: &[u32]| s.strip_suffix(&[vocab_eos]).map(<[u32]>::to_vec).unwrap_or_else(|| s.to_vec());
        strip(&self.predicted) == strip(&self.gold)
    }
}

/// Macro F1 over the changed / unchanged classes. An unparseable
/// prediction counts as the wrong class.
pub fn has_changed_f1(records: &[OutcomeRecord]) -> f64 {
    let pairs: Vec<(bool, bool)> = records
        .iter()
        .map(|r| {
            let pred = r.parsed.as_ref().map_or(!r.truth.changed, |p| p.changed);
            (pred, r.truth.changed)
        })
        .collect();
    let f1 = |class: bool| {
        let tp = pairs.iter().filter(|&&(p, t)| p == class && t == class).count() as f64;
        let fp = pairs.iter().filter(|&&(p, t)| p == class && t != class).count() as f64;
        let fneg = pairs.iter().filter(|&&(p, t)| p != class && t == class).count() as f64;
        if tp + fp == 0.0 {
            if tp + fneg == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            2.0 * tp / (2.0 * tp + fp + fneg)
        }
    };
    (f1(true) + f1(false)) / 2.0
}

/// Fraction of records whose predicted content equals the gold content.
pub fn content_match(records: &[OutcomeRecord]) -> f64 {
    fraction(records, |r| r.parsed.as_ref().is_some_and(|p| p.content == r.truth.content))
}

/// Fraction with the correct branch.
pub fn branch_accuracy(records: &[OutcomeRecord]) -> f64 {
    fraction(records, |r| r.parsed.as_ref().is_some_and(|p| p.changed == r.truth.changed))
}

/// Fraction of records whose explanation equals the gold one token for
/// token (a trailing end token is ignored).
pub fn exact_match(records: &[OutcomeRecord], eos: u32) -> f64 {
    fraction(records, |r| r.parsed.is_some() && r.trimmed_eq(eos))
}

fn fraction<T>(xs: &[T], pred: impl Fn(&T) -> bool) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().filter(|x| pred(x)).count() as f64 / xs.len() as f64
}

/// Proportional layer map `round(l * L_E / L_M)`, clamped to the explainer.
pub fn map_layer(l: usize, target_layers: usize, explainer_layers: usize) -> usize {
    let m = ((l * explainer_layers) as f64 / target_layers as f64).round() as usize;
    m.min(explainer_layers - 1)
}

/// `E<hE, P hM> / sqrt(E<hE,hE> E<P hM, P hM>)` over all inputs, layers
/// and positions. Without projections, `P` is the identity.
pub fn dot_similarity(
    explainer: &Transformer,
    target: &Transformer,
    projections: Option<&ProjectionSet>,
    corpus: &[Vec<u32>],
) -> Result<f64> {
    let (le, lm) = (explainer.layers(), target.layers());
    let (mut cross, mut ee, mut mm) = (0.0f64, 0.0f64, 0.0f64);
    for x in corpus {
        let seq = TokenSeq::new(x.clone());
        let te = explainer.forward(&seq, &LayerSet::all(le))?;
        let tm = target.forward(&seq, &LayerSet::all(lm))?;
        for l in 0..lm {
            let lx = map_layer(l, lm, le);
            for t in 0..x.len() {
                let hm = match projections {
                    Some(p) => p.project(l, tm.at(l, t))?,
                    None => tm.at(l, t).to_vec(),
                };
                let he = te.at(lx, t);
                if he.len() != hm.len() {
                    return Err(Error::Shape(format!(
                        "explainer width {} vs projected target width {}",
                        he.len(),
                        hm.len()
                    )));
                }
                cross += dot(he, &hm) as f64;
                ee += dot(he, he) as f64;
                mm += dot(&hm, &hm) as f64;
            }
        }
    }
    if ee == 0.0 || mm == 0.0 {
        return Ok(0.0);
    }
    Ok(cross / (ee * mm).sqrt())
}

/// Mean over features and their exemplars of
/// `corr_t(<hE, P v>, <hM, v>)`.
pub fn sae_pattern_similarity(
    explainer: &Transformer,
    target: &Transformer,
    projections: Option<&ProjectionSet>,
    features: &[(usize, Vec<f32>)],
    exemplars: &[Vec<Vec<u32>>],
) -> Result<f64> {
    if features.len() != exemplars.len() {
        return Err(Error::Shape("one exemplar list per feature required".into()));
    }
    let mut per_feature = Vec::new();
    for ((layer, v), xs) in features.iter().zip(exemplars) {
        let lx = map_layer(*layer, target.layers(), explainer.layers());
        let ve = match projections {
            Some(p) => p.project(*layer, v)?,
            None => v.clone(),
        };
        let mut corrs = Vec::new();
        for x in xs {
            let seq = TokenSeq::new(x.clone());
            let te = explainer.forward(&seq, &LayerSet::of(&[lx]))?;
            let tm = target.forward(&seq, &LayerSet::of(&[*layer]))?;
            let ae: Vec<f32> = (0..x.len()).map(|t| dot(te.at(lx, t), &ve)).collect();
            let am: Vec<f32> = (0..x.len()).map(|t| dot(tm.at(*layer, t), v)).collect();
            corrs.push(pearson(&ae, &am)?);
        }
        if !corrs.is_empty() {
            per_feature.push(corrs.iter().sum::<f64>() / corrs.len() as f64);
        }
    }
    Ok(mean_stderr(&per_feature).0)
}

/// One reported metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub group: String,
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub note: String,
}

/// Metrics with standard errors plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub meta: BTreeMap<String, String>,
    pub rows: Vec<MetricRow>,
}

impl ScoreReport {
    pub fn push(&mut self, group: &str, metric: &str, values: &[f64], note: &str) {
        let (mean, stderr) = mean_stderr(values);
        self.rows.push(MetricRow {
            group: group.into(),
            metric: metric.into(),
            mean,
            stderr,
            n: values.len(),
            note: note.into(),
        });
    }

    pub fn get(&self, group: &str, metric: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.group == group && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,metric,mean,stderr,n,note\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{},{}\n",
                r.group, r.metric, r.mean, r.stderr, r.n, r.note
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
