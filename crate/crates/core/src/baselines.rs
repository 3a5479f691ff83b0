// SPDX-License-Identifier: MIT OR Apache-2.0

//! Comparison methods that need no explainer training: nearest-neighbour
//! feature descriptions, SelfIE-style prompting and zero-shot outcome
//! prompting.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::describe::LabelingCorpus;
use crate::error::{Error, Result};
use crate::explain::{changed_prefix, selfie_prompt, unchanged_prefix, zero_shot_suffix};
use crate::model::{LayerSet, TokenSeq, Transformer};
use crate::patching::restricted_argmax;
use crate::tensor::{dot, normalized};
use crate::vocab::Vocab;
use crate::world::OPTIONS_START;

/// A stored training feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub layer: usize,
    #[serde(with = "crate::codec::b64")]
    pub vector: Vec<f32>,
    pub label: usize,
}

/// Unit-norm training features, searchable per layer or globally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureIndex {
    entries: Vec<IndexEntry>,
    by_layer: BTreeMap<usize, Vec<usize>>,
}

impl FeatureIndex {
    /// Entries are sorted by id so the first maximum is the lowest id.
    pub fn build(mut entries: Vec<IndexEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        let mut seen = BTreeSet::new();
        for e in &mut entries {
            if !seen.insert(e.id.clone()) {
                return Err(Error::Dataset(format!("duplicate feature id `{}`", e.id)));
            }
            e.vector = normalized(&e.vector, 1e-12)
                .ok_or_else(|| Error::Dataset(format!("feature `{}` has zero norm", e.id)))?;
        }
        let mut by_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            by_layer.entry(e.layer).or_default().push(i);
        }
        Ok(Self { entries, by_layer })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    fn best<'a>(&'a self, v: &[f32], idx: impl Iterator<Item = usize>) -> Option<&'a IndexEntry> {
        let mut best: Option<(usize, f32)> = None;
        for i in idx {
            let s = dot(&self.entries[i].vector, v);
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| &self.entries[i])
    }

    /// Most similar training feature of the same layer.
    pub fn nn_layer(&self, v: &[f32], layer: usize) -> Result<&IndexEntry> {
        let bucket = self
            .by_layer
            .get(&layer)
            .ok_or_else(|| Error::Dataset(format!("no training features at layer {layer}")))?;
        self.best(v, bucket.iter().copied())
            .ok_or_else(|| Error::Dataset(format!("no training features at layer {layer}")))
    }

    /// Most similar training feature of any layer.
    pub fn nn_all(&self, v: &[f32]) -> Result<&IndexEntry> {
        self.best(v, 0..self.entries.len())
            .ok_or_else(|| Error::Dataset("feature index is empty".into()))
    }
}

/// Multipliers tried by [`selfie_describe`].
pub const SELFIE_SCALES: [f32; 5] = [1.0, 5.0, 10.0, 25.0, 50.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfieResult {
    /// `(scale, decoded tokens, parsed label, simulator score)`.
    pub per_scale: Vec<(f32, Vec<u32>, Option<usize>, f64)>,
    pub best: usize,
}

impl SelfieResult {
    pub fn best_decode(&self) -> &[u32] {
        &self.per_scale[self.best].1
    }

    pub fn best_score(&self) -> f64 {
        self.per_scale[self.best].3
    }
}

/// Decodes `s · v` written into both slots of the definition prompt for
/// every scale and keeps the decode with the best simulator score. A
/// decode outside the grammar falls back to its first token, and scores
/// 0 if that fails too.
pub fn selfie_describe(
    model: &Transformer,
    vocab: &Vocab,
    lc: &LabelingCorpus<'_>,
    acts: &[Vec<f32>],
    v: &[f32],
    scales: &[f32],
) -> Result<SelfieResult> {
    if scales.is_empty() {
        return Err(Error::Config("no SelfIE scales".into()));
    }
    let p = selfie_prompt(vocab);
    let mut per_scale = Vec::with_capacity(scales.len());
    for &s in scales {
        let sv: Vec<f32> = v.iter().map(|x| x * s).collect();
        let mut seq = TokenSeq::new(p.ids.clone());
        for &slot in &p.slots {
            seq = seq.with_slot(slot, sv.clone());
        }
        let mut out = model.generate(&seq, 4, vocab.eos())?;
        if out.last() == Some(&vocab.eos()) {
            out.pop();
        }
        let label = lc.grammar().parse(&out).or_else(|| out.first().and_then(|t| lc.grammar().parse(&[*t])));
        let score = match label {
            Some(l) => lc.score(l, acts)?,
            None => 0.0,
        };
        per_scale.push((s, out, label, score));
    }
    let mut best = 0;
    for (i, e) in per_scale.iter().enumerate() {
        if e.3 > per_scale[best].3 {
            best = i;
        }
    }
    Ok(SelfieResult { per_scale, best })
}

/// Option tokens plus `unknown` of a fact prompt.
pub fn admissible_contents(vocab: &Vocab, x: &[u32]) -> Vec<u32> {
    let end = (OPTIONS_START + 5).min(x.len());
    let mut v = x[OPTIONS_START.min(end)..end].to_vec();
    v.push(vocab.id("unknown"));
    v
}

/// Constrained zero-shot answer to an outcome question: the branch with
/// the higher likelihood (ties to "unchanged"), then `content_prefix`
/// and the most likely token from `allowed`.
pub fn zero_shot_outcome(
    model: &Transformer,
    vocab: &Vocab,
    question: &TokenSeq,
    content_prefix: &[u32],
    allowed: &[u32],
) -> Result<Vec<u32>> {
    if allowed.is_empty() {
        return Err(Error::Config("no admissible content tokens".into()));
    }
    let mut q = question.clone();
    q.ids.extend(zero_shot_suffix(vocab));
    let changed = changed_prefix(vocab);
    let unchanged = unchanged_prefix(vocab);
    let lc = model.sequence_logprob(&q, &changed)?;
    let lu = model.sequence_logprob(&q, &unchanged)?;
    let mut out = if lc > lu { changed } else { unchanged };
    out.extend_from_slice(content_prefix);
    let mut full = q.clone();
    full.ids.extend_from_slice(&out);
    let trace = model.forward(&full, &LayerSet::none())?;
    let last = trace.logits.row(trace.logits.rows() - 1);
    out.push(restricted_argmax(last, allowed));
    out.extend(vocab.ids(&[">>>", "."]));
    out.push(vocab.eos());
    Ok(out)
}

/// Zero-shot patching answer; content is one of the options or `unknown`.
pub fn zero_shot_patch(model: &Transformer, vocab: &Vocab, question: &TokenSeq, x: &[u32]) -> Result<Vec<u32>> {
    zero_shot_outcome(model, vocab, question, &[], &admissible_contents(vocab, x))
}

/// Zero-shot hint-removal answer; content is `answer : LETTER`.
pub fn zero_shot_ablate(model: &Transformer, vocab: &Vocab, question: &TokenSeq) -> Result<Vec<u32>> {
    zero_shot_outcome(model, vocab, question, &vocab.ids(&["answer", ":"]), &vocab.letters())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::parse_outcome;
    use crate::labels::Grammar;
    use crate::model::ModelConfig;
    use crate::vocab::{TokenClass, VocabSizes};
    use proptest::prelude::*;

    fn entry(id: &str, layer: usize, v: &[f32], label: usize) -> IndexEntry {
        IndexEntry {
            id: id.into(),
            layer,
            vector: v.to_vec(),
            label,
        }
    }

    #[test]
    fn nearest_neighbour_reference_cases() {
        let idx = FeatureIndex::build(vec![entry("f2", 0, &[0.0, 1.0], 2), entry("f1", 0, &[1.0, 0.0], 1)]).unwrap();
        let q = normalized(&[0.9, 0.1], 0.0).unwrap();
        assert_eq!(idx.nn_layer(&q, 0).unwrap().label, 1);
        let tie = normalized(&[1.0, 1.0], 0.0).unwrap();
        assert_eq!(idx.nn_all(&tie).unwrap().id, "f1");
        assert!(idx.nn_layer(&q, 3).is_err());
        assert_eq!(idx.nn_layer(&[0.0, 1.0], 0).unwrap().id, "f2");
        assert!(FeatureIndex::build(vec![entry("a", 0, &[1.0], 0), entry("a", 1, &[1.0], 0)]).is_err());
        let single = FeatureIndex::build(vec![entry("s", 2, &[3.0, 4.0], 7)]).unwrap();
        assert_eq!(single.nn_all(&[-1.0, 0.0]).unwrap().label, 7);
        assert!((dot(&single.entries()[0].vector, &single.entries()[0].vector) - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn nn_all_matches_a_linear_scan(
            vs in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 3), 1..20),
            q in proptest::collection::vec(-1.0f32..1.0, 3),
        ) {
            let entries: Vec<IndexEntry> = vs
                .iter()
                .enumerate()
                .filter(|(_, v)| v.iter().any(|x| x.abs() > 1e-3))
                .map(|(i, v)| entry(&format!("f{i:03}"), i % 3, v, i))
                .collect();
            prop_assume!(!entries.is_empty());
            let idx = FeatureIndex::build(entries.clone()).unwrap();
            let got = idx.nn_all(&q).unwrap();
            // oracle: scan in id order, keep the first strict maximum
            let mut best: Option<(String, f32)> = None;
            let mut sorted = entries.clone();
            sorted.sort_by(|a, b| a.id.cmp(&b.id));
            for e in &sorted {
                let u = normalized(&e.vector, 0.0).unwrap();
                let s: f32 = u.iter().zip(&q).map(|(a, b)| a * b).sum();
                if best.as_ref().map_or(true, |(_, b)| s > *b) {
                    best = Some((e.id.clone(), s));
                }
            }
            prop_assert_eq!(&got.id, &best.unwrap().0);
            if let Ok(l) = idx.nn_layer(&q, got.layer) {
                prop_assert_eq!(&l.id, &got.id);
            }
            // enlarging the index never lowers the achieved inner product
            let smaller = FeatureIndex::build(entries[..entries.len().div_ceil(2)].to_vec()).unwrap();
            prop_assert!(dot(&smaller.nn_all(&q).unwrap().vector, &q) <= dot(&got.vector, &q) + 1e-6);
        }
    }

    fn setup() -> (Vocab, Transformer) {
        let v = Vocab::build(VocabSizes {
            subjects: 16,
            relations: 3,
            objects_per_relation: 6,
            positions: 16,
        })
        .unwrap();
        let m = Transformer::new(ModelConfig {
            layers: 4,
            hidden: 16,
            heads: 2,
            vocab: v.len(),
            context: 64,
            mlp_ratio: 2,
            seed: 4,
            rescale_slots: false,
        })
        .unwrap();
        (v, m)
    }

    #[test]
    fn selfie_reports_every_scale() {
        let (v, m) = setup();
        let g = Grammar::build(&v);
        let x = v.ids(&["count", "1", "2", "3"]);
        let lc = LabelingCorpus::new(&g, vec![x]).unwrap();
        let acts = vec![vec![0.0, 1.0, 1.0, 1.0]];
        let r = selfie_describe(&m, &v, &lc, &acts, &[0.1; 16], &SELFIE_SCALES).unwrap();
        assert_eq!(r.per_scale.len(), 5);
        let max = r.per_scale.iter().map(|e| e.3).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.best_score(), max);
    }

    #[test]
    fn zero_shot_outputs_are_always_parseable() {
        let (v, m) = setup();
        let x = {
            let mut x = v.ids(&["<bos>", "the", "capital", "of"]);
            x.push(v.subject(0));
            x.push(v.id("options"));
            x.extend((0..5).map(|o| v.object(0, o)));
            x.extend(v.ids(&["unknown", ":"]));
            x
        };
        let q = TokenSeq::new(x.clone());
        let out = zero_shot_patch(&m, &v, &q, &x).unwrap();
        let o = parse_outcome(&v, &out).unwrap();
        assert!(admissible_contents(&v, &x).contains(&o.content[0]));
        let out = zero_shot_ablate(&m, &v, &q).unwrap();
        let o = parse_outcome(&v, &out).unwrap();
        assert_eq!(v.class(o.content[2]), TokenClass::Letter);
    }
}
