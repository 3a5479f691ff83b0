// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation patching: counterfactual pairs, chunk-averaged patches,
//! outcome labels, balanced datasets, explainer training and the location
//! probe.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::b64;
use crate::describe::{slot_input, train_with_projections};
use crate::error::{Error, Result};
use crate::explain::{
    location_explanation, location_prompt, outcome_explanation, parse_location, patch_prompt, Ablations, Outcome,
    PATCH_TEMPLATES,
};
use crate::metrics::OutcomeRecord;
use crate::model::{Intervention, LayerSet, TokenSeq, Transformer};
use crate::projection::{ProjectionMode, ProjectionSet};
use crate::tensor::argmax;
use crate::train::{ExplanationExample, LossCurve, TrainConfig};
use crate::vocab::Vocab;
use crate::world::{Fact, World, OPTIONS_START, SUBJECT_POS};

/// Four contiguous layer blocks covering `0..layers`; earlier blocks take
/// the extra layers.
pub fn chunks(layers: usize) -> Result<Vec<Vec<usize>>> {
    if layers < 4 {
        return Err(Error::Config(format!("need at least 4 layers to form chunks, got {layers}")));
    }
    let (base, extra) = (layers / 4, layers % 4);
    let mut out = Vec::with_capacity(4);
    let mut start = 0;
    for c in 0..4 {
        let size = base + usize::from(c < extra);
        out.push((start..start + size).collect());
        start += size;
    }
    Ok(out)
}

/// Role of the patched position in the fact prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenType {
    SubjectFinal,
    Relation,
    OrigOption,
    NewOption,
    OtherOption,
    Other,
}

impl TokenType {
    pub const ALL: [TokenType; 6] = [
        Self::SubjectFinal,
        Self::Relation,
        Self::OrigOption,
        Self::NewOption,
        Self::OtherOption,
        Self::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SubjectFinal => "subject-final",
            Self::Relation => "relation",
            Self::OrigOption => "orig-option",
            Self::NewOption => "new-option",
            Self::OtherOption => "other-option",
            Self::Other => "other",
        }
    }
}

impl fmt::Display for TokenType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Two fact prompts with the same relation and option list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPair {
    pub id: usize,
    pub fact: usize,
    pub fact_prime: usize,
    pub options: Vec<usize>,
    pub x: Vec<u32>,
    pub x_prime: Vec<u32>,
}

impl CounterfactualPair {
    pub fn token_type(&self, world: &World, t: usize) -> TokenType {
        let opts = OPTIONS_START..OPTIONS_START + self.options.len();
        if t == SUBJECT_POS {
            TokenType::SubjectFinal
        } else if (1..SUBJECT_POS).contains(&t) {
            TokenType::Relation
        } else if opts.contains(&t) {
            let tok = self.x[t];
            if tok == world.answer_token(self.fact) {
                TokenType::OrigOption
            } else if tok == world.answer_token(self.fact_prime) {
                TokenType::NewOption
            } else {
                TokenType::OtherOption
            }
        } else {
            TokenType::Other
        }
    }

    /// Option tokens plus `unknown`: the admissible outcome contents.
    pub fn admissible(&self, world: &World) -> Vec<u32> {
        let mut v = self.x[OPTIONS_START..OPTIONS_START + self.options.len()].to_vec();
        v.push(world.vocab.id("unknown"));
        v
    }
}

/// All ordered pairs of facts sharing a relation with different objects.
pub fn pair_candidates(world: &World) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for r in 0..world.config.relations {
        let facts: Vec<(usize, &Fact)> = world.facts.iter().enumerate().filter(|(_, f)| f.relation == r).collect();
        let mut objs: Vec<usize> = facts.iter().map(|(_, f)| f.object).collect();
        objs.sort_unstable();
        objs.dedup();
        if objs.len() < 2 {
            return Err(Error::Dataset(format!("relation {r} has a single object")));
        }
        for &(i, a) in &facts {
            for &(j, b) in &facts {
                if i != j && a.object != b.object && a.subject != b.subject {
                    out.push((i, j));
                }
            }
        }
    }
    Ok(out)
}

/// Samples up to `max_pairs` counterfactual pairs (all of them if `None`).
pub fn make_counterfactual_pairs(world: &World, max_pairs: Option<usize>, seed: u64) -> Result<Vec<CounterfactualPair>> {
    let mut cands = pair_candidates(world)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(k) = max_pairs {
        cands.shuffle(&mut rng);
        cands.truncate(k);
        cands.sort_unstable();
    }
    Ok(cands
        .into_iter()
        .enumerate()
        .map(|(id, (i, j))| {
            let (a, b) = (world.facts[i], world.facts[j]);
            let options = world.sample_options(&mut rng, &[a.object, b.object]);
            CounterfactualPair {
                id,
                fact: i,
                fact_prime: j,
                x: world.render_fact_prompt(a, &options),
                x_prime: world.render_fact_prompt(b, &options),
                options,
            }
        })
        .collect())
}

/// Mean of the post-layer residual at `t` over `layers`.
pub fn chunk_vector(model: &Transformer, x: &[u32], t: usize, layers: &[usize]) -> Result<Vec<f32>> {
    if t >= x.len() {
        return Err(Error::Shape(format!("position {t} outside input of length {}", x.len())));
    }
    if layers.is_empty() {
        return Err(Error::Config("empty layer chunk".into()));
    }
    let trace = model.forward(&TokenSeq::new(x.to_vec()), &LayerSet::of(layers))?;
    let mut v = vec![0.0f32; model.hidden()];
    for &l in layers {
        for (a, b) in v.iter_mut().zip(trace.at(l, t)) {
            *a += b;
        }
    }
    let k = layers.len() as f32;
    v.iter_mut().for_each(|a| *a /= k);
    Ok(v)
}

/// Next-token argmax of `x` with and without `v` written at `t` after
/// every layer of the chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchOutcome {
    pub vector: Vec<f32>,
    pub clean: u32,
    pub content: u32,
    pub has_changed: bool,
}

pub fn patch_with_vector(model: &Transformer, x: &[u32], t: usize, layers: &[usize], v: Vec<f32>) -> Result<PatchOutcome> {
    let seq = TokenSeq::new(x.to_vec());
    let clean = model.forward(&seq, &LayerSet::none())?.last_argmax();
    let iv = Intervention {
        layers: layers.to_vec(),
        position: t,
        vector: v.clone(),
    };
    let content = model.forward_patched(&seq, &LayerSet::none(), &[iv])?.last_argmax();
    Ok(PatchOutcome {
        vector: v,
        clean,
        content,
        has_changed: content != clean,
    })
}

pub fn patch_outcome(model: &Transformer, x: &[u32], x_prime: &[u32], t: usize, layers: &[usize]) -> Result<PatchOutcome> {
    if t >= x.len() || t >= x_prime.len() {
        return Err(Error::Shape(format!(
            "position {t} outside inputs of lengths {} and {}",
            x.len(),
            x_prime.len()
        )));
    }
    let v = chunk_vector(model, x_prime, t, layers)?;
    patch_with_vector(model, x, t, layers, v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSample {
    pub id: String,
    pub pair: usize,
    pub x: Vec<u32>,
    pub x_prime: Vec<u32>,
    pub t: usize,
    pub token_type: TokenType,
    pub chunk: usize,
    pub layers: Vec<usize>,
    #[serde(with = "b64")]
    pub vector: Vec<f32>,
    pub has_changed: bool,
    pub content: u32,
}

impl PatchSample {
    pub fn outcome(&self) -> Outcome {
        Outcome {
            changed: self.has_changed,
            content: vec![self.content],
        }
    }
}

/// Labels every (pair, position, chunk). Samples whose patched prediction
/// is not an option or `unknown` are dropped and counted.
pub fn label_patch_samples(model: &Transformer, world: &World, pairs: &[CounterfactualPair]) -> Result<(Vec<PatchSample>, usize)> {
    let blocks = chunks(model.layers())?;
    let per_pair: Vec<Result<(Vec<PatchSample>, usize)>> = pairs
        .par_iter()
        .map(|p| {
            let admissible = p.admissible(world);
            let mut out = Vec::new();
            let mut invalid = 0;
            for t in 0..p.x.len() {
                for (c, layers) in blocks.iter().enumerate() {
                    let o = patch_outcome(model, &p.x, &p.x_prime, t, layers)?;
                    if !admissible.contains(&o.content) {
                        invalid += 1;
                        continue;
                    }
                    out.push(PatchSample {
                        id: format!("p{:05}-t{t:02}-c{c}", p.id),
                        pair: p.id,
                        x: p.x.clone(),
                        x_prime: p.x_prime.clone(),
                        t,
                        token_type: p.token_type(world, t),
                        chunk: c,
                        layers: layers.clone(),
                        vector: o.vector,
                        has_changed: o.has_changed,
                        content: o.content,
                    });
                }
            }
            Ok((out, invalid))
        })
        .collect();
    let mut samples = Vec::new();
    let mut invalid = 0;
    for r in per_pair {
        let (s, i) = r?;
        samples.extend(s);
        invalid += i;
    }
    Ok((samples, invalid))
}

/// Recomputes the stored label of each sample; returns the fraction that
/// match exactly.
pub fn reproduce_patch_labels(model: &Transformer, samples: &[PatchSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(1.0);
    }
    let ok: Vec<Result<bool>> = samples
        .par_iter()
        .map(|s| {
            let o = patch_outcome(model, &s.x, &s.x_prime, s.t, &s.layers)?;
            Ok(o.has_changed == s.has_changed && o.content == s.content && o.vector == s.vector)
        })
        .collect();
    let mut hits = 0usize;
    for r in ok {
        hits += usize::from(r?);
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// One row of a balancing census.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CensusRow {
    pub group: String,
    pub chunk: Option<usize>,
    pub changed_raw: usize,
    pub unchanged_raw: usize,
    pub changed_kept: usize,
    pub unchanged_kept: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub cap: usize,
    pub rows: Vec<CensusRow>,
}

impl Census {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,chunk,changed_raw,unchanged_raw,changed_kept,unchanged_kept\n");
        for r in &self.rows {
            let chunk = r.chunk.map(|c| c.to_string()).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{},{chunk},{},{},{},{}\n",
                r.group, r.changed_raw, r.unchanged_raw, r.changed_kept, r.unchanged_kept
            ));
        }
        out
    }

    pub fn kept(&self) -> (usize, usize) {
        self.rows
            .iter()
            .fold((0, 0), |(c, u), r| (c + r.changed_kept, u + r.unchanged_kept))
    }

    /// Every cell is cut to `min(cap, size)`.
    pub fn is_balanced(&self) -> bool {
        self.rows.iter().all(|r| {
            r.changed_kept == r.changed_raw.min(self.cap) && r.unchanged_kept == r.unchanged_raw.min(self.cap)
        })
    }
}

/// Uniform per-cell downsampling without replacement. `key` returns the
/// census group of an item, `changed` its class.
pub(crate) fn balance_cells<T: Clone, K: Ord + Clone>(
    items: &[T],
    groups: &[K],
    key: impl Fn(&T) -> K,
    changed: impl Fn(&T) -> bool,
    cap: usize,
    seed: u64,
) -> (Vec<T>, Vec<(K, [usize; 4])>) {
    let mut cells: BTreeMap<(K, bool), Vec<usize>> = BTreeMap::new();
    for g in groups {
        cells.entry((g.clone(), true)).or_default();
        cells.entry((g.clone(), false)).or_default();
    }
    for (i, it) in items.iter().enumerate() {
        cells.entry((key(it), changed(it))).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    let mut census: BTreeMap<K, [usize; 4]> = BTreeMap::new();
    for ((k, ch), mut idx) in cells {
        let raw = idx.len();
        idx.shuffle(&mut rng);
        idx.truncate(cap);
        let row = census.entry(k).or_insert([0; 4]);
        if ch {
            row[0] = raw;
            row[2] = idx.len();
        } else {
            row[1] = raw;
            row[3] = idx.len();
        }
        kept.extend(idx);
    }
    kept.sort_unstable();
    (kept.into_iter().map(|i| items[i].clone()).collect(), census.into_iter().collect())
}

/// Caps each (token type, chunk, has-changed) cell at `cap`.
pub fn balance_patch_dataset(samples: &[PatchSample], cap: usize, seed: u64) -> (Vec<PatchSample>, Census) {
    let chunks_seen = samples.iter().map(|s| s.chunk + 1).max().unwrap_or(4).max(4);
    let groups: Vec<(TokenType, usize)> = TokenType::ALL
        .iter()
        .flat_map(|&t| (0..chunks_seen).map(move |c| (t, c)))
        .collect();
    let (kept, rows) = balance_cells(samples, &groups, |s| (s.token_type, s.chunk), |s| s.has_changed, cap, seed);
    let rows = rows
        .into_iter()
        .map(|((t, c), n)| CensusRow {
            group: t.name().into(),
            chunk: Some(c),
            changed_raw: n[0],
            unchanged_raw: n[1],
            changed_kept: n[2],
            unchanged_kept: n[3],
        })
        .collect();
    (kept, Census { cap, rows })
}

/// Splits samples by counterfactual pair so no pair straddles the split.
pub fn split_by_pair(samples: Vec<PatchSample>, test_fraction: f64, seed: u64) -> (Vec<PatchSample>, Vec<PatchSample>) {
    let mut pairs: Vec<usize> = samples.iter().map(|s| s.pair).collect();
    pairs.sort_unstable();
    pairs.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let n_test = ((pairs.len() as f64) * test_fraction).round() as usize;
    let test: std::collections::BTreeSet<usize> = pairs.into_iter().take(n_test).collect();
    samples.into_iter().partition(|s| !test.contains(&s.pair))
}

/// Rendered patching question and its gold explanation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub sample_id: String,
    pub template: usize,
    pub ablations: Ablations,
    pub prompt: Vec<u32>,
    pub slot: Option<usize>,
    /// Target layer whose projection reads the slot (first chunk layer).
    pub layer: usize,
    #[serde(with = "b64")]
    pub vector: Vec<f32>,
    pub gold: Vec<u32>,
    pub has_changed: bool,
    pub content: u32,
}

impl PatchRecord {
    pub fn example(&self, projected: bool) -> ExplanationExample {
        ExplanationExample {
            prompt: self.prompt.clone(),
            slot: self.slot.map(|p| slot_input(p, self.layer, &self.vector, projected)),
            explanation: self.gold.clone(),
        }
    }

    pub fn seq(&self, projections: Option<&ProjectionSet>) -> Result<TokenSeq> {
        let seq = TokenSeq::new(self.prompt.clone());
        Ok(match self.slot {
            Some(p) => {
                let v = match projections {
                    Some(set) => set.project(self.layer, &self.vector)?,
                    None => self.vector.clone(),
                };
                seq.with_slot(p, v)
            }
            None => seq,
        })
    }
}

pub fn render_patch_record(vocab: &Vocab, sample: &PatchSample, template: usize, ablations: Ablations) -> Result<PatchRecord> {
    let p = patch_prompt(vocab, template, &sample.x, sample.t, &sample.layers, ablations)?;
    Ok(PatchRecord {
        sample_id: sample.id.clone(),
        template,
        ablations,
        prompt: p.ids,
        slot: p.slots.first().copied(),
        layer: sample.layers[0],
        vector: sample.vector.clone(),
        gold: outcome_explanation(vocab, &sample.outcome()),
        has_changed: sample.has_changed,
        content: sample.content,
    })
}

/// Renders each sample under a seeded random template.
pub fn render_patch_records(vocab: &Vocab, samples: &[PatchSample], ablations: Ablations, seed: u64) -> Result<Vec<PatchRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .map(|s| render_patch_record(vocab, s, rng.gen_range(0..PATCH_TEMPLATES), ablations))
        .collect()
}

pub fn train_explainer_patch(
    explainer: &mut Transformer,
    records: &[PatchRecord],
    projections: Option<&mut ProjectionSet>,
    mode: ProjectionMode,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    let projected = projections.is_some();
    let examples = records.iter().map(|r| r.example(projected)).collect();
    train_with_projections(explainer, examples, projections, mode, cfg)
}

/// Greedy outcome explanation for one record.
pub fn predict_outcome(explainer: &Transformer, vocab: &Vocab, seq: &TokenSeq) -> Result<Vec<u32>> {
    explainer.generate(seq, 16, vocab.eos())
}

/// Predicts and scores every record.
pub fn evaluate_patch(
    explainer: &Transformer,
    vocab: &Vocab,
    projections: Option<&ProjectionSet>,
    records: &[PatchRecord],
) -> Result<Vec<OutcomeRecord>> {
    records
        .par_iter()
        .map(|r| {
            let pred = predict_outcome(explainer, vocab, &r.seq(projections)?)?;
            OutcomeRecord::new(vocab, r.sample_id.clone(), pred, r.gold.clone())
        })
        .collect()
}

/// Location-probe record: `v` is the chunk mean at `t` of `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationRecord {
    pub id: String,
    pub x: Vec<u32>,
    pub t: usize,
    pub chunk: usize,
    pub layers: Vec<usize>,
    #[serde(with = "b64")]
    pub vector: Vec<f32>,
    pub prompt: Vec<u32>,
    pub slot: usize,
    pub gold: Vec<u32>,
}

impl LocationRecord {
    pub fn example(&self, projected: bool) -> ExplanationExample {
        ExplanationExample {
            prompt: self.prompt.clone(),
            slot: Some(slot_input(self.slot, self.layers[0], &self.vector, projected)),
            explanation: self.gold.clone(),
        }
    }
}

/// One record per (input, position, chunk).
pub fn build_location_dataset(model: &Transformer, vocab: &Vocab, inputs: &[Vec<u32>]) -> Result<Vec<LocationRecord>> {
    let blocks = chunks(model.layers())?;
    let per: Vec<Result<Vec<LocationRecord>>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let all: Vec<usize> = (0..model.layers()).collect();
            let trace = model.forward(&TokenSeq::new(x.clone()), &LayerSet::of(&all))?;
            let p = location_prompt(vocab, x);
            let mut out = Vec::new();
            for t in 0..x.len() {
                for (c, layers) in blocks.iter().enumerate() {
                    let mut v = vec![0.0f32; model.hidden()];
                    for &l in layers {
                        for (a, b) in v.iter_mut().zip(trace.at(l, t)) {
                            *a += b / layers.len() as f32;
                        }
                    }
                    out.push(LocationRecord {
                        id: format!("x{i:04}-t{t:02}-c{c}"),
                        x: x.clone(),
                        t,
                        chunk: c,
                        layers: layers.clone(),
                        vector: v,
                        prompt: p.ids.clone(),
                        slot: p.slots[0],
                        gold: location_explanation(vocab, t, layers)?,
                    });
                }
            }
            Ok(out)
        })
        .collect();
    let mut out = Vec::new();
    for r in per {
        out.extend(r?);
    }
    Ok(out)
}

/// Greedy decode of the location answer.
pub fn decode_location(
    explainer: &Transformer,
    vocab: &Vocab,
    projections: Option<&ProjectionSet>,
    v: &[f32],
    layer: usize,
    x: &[u32],
) -> Result<Option<(usize, Vec<usize>)>> {
    let p = location_prompt(vocab, x);
    let slot = match projections {
        Some(set) => set.project(layer, v)?,
        None => v.to_vec(),
    };
    let out = explainer.generate(&TokenSeq::new(p.ids).with_slot(p.slots[0], slot), 12, vocab.eos())?;
    Ok(parse_location(vocab, &out))
}

/// Fraction of records whose decoded `(t, layers)` is exactly right.
pub fn location_accuracy(
    explainer: &Transformer,
    vocab: &Vocab,
    projections: Option<&ProjectionSet>,
    records: &[LocationRecord],
) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<Result<bool>> = records
        .par_iter()
        .map(|r| {
            let got = decode_location(explainer, vocab, projections, &r.vector, r.layers[0], &r.x)?;
            Ok(got == Some((r.t, r.layers.clone())))
        })
        .collect();
    let mut n = 0usize;
    for h in hits {
        n += usize::from(h?);
    }
    Ok(n as f64 / records.len() as f64)
}

/// Chunk index of the true answer in decoded layers, if any.
pub fn chunk_of(layers: &[usize], model_layers: usize) -> Option<usize> {
    chunks(model_layers).ok()?.iter().position(|c| c.as_slice() == layers)
}

/// Argmax over a restricted token set.
pub(crate) fn restricted_argmax(logits: &[f32], allowed: &[u32]) -> u32 {
    let vals: Vec<f32> = allowed.iter().map(|&t| logits[t as usize]).collect();
    allowed[argmax(&vals)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::world::WorldConfig;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn chunks_partition_layers(l in 4usize..40) {
            let c = chunks(l).unwrap();
            prop_assert_eq!(c.len(), 4);
            let flat: Vec<usize> = c.iter().flatten().copied().collect();
            prop_assert_eq!(flat, (0..l).collect::<Vec<_>>());
            let sizes: Vec<usize> = c.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    fn world() -> World {
        World::generate(&WorldConfig {
            seed: 3,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn target(w: &World) -> Transformer {
        Transformer::new(ModelConfig {
            layers: 4,
            hidden: 16,
            heads: 2,
            vocab: w.vocab.len(),
            context: 48,
            mlp_ratio: 2,
            seed: 5,
            rescale_slots: false,
        })
        .unwrap()
    }

    #[test]
    fn chunks_for_eight_and_nine_layers() {
        assert_eq!(chunks(8).unwrap(), vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]);
        assert_eq!(chunks(9).unwrap()[0], vec![0, 1, 2]);
        assert!(chunks(3).is_err());
    }

    #[test]
    fn pairs_share_relation_and_options() {
        let w = world();
        let pairs = make_counterfactual_pairs(&w, None, 1).unwrap();
        for p in &pairs {
            let (a, b) = (w.facts[p.fact], w.facts[p.fact_prime]);
            assert_eq!(a.relation, b.relation);
            assert_ne!(a.object, b.object);
            assert!(p.options.contains(&a.object) && p.options.contains(&b.object));
            assert_eq!(p.x.len(), p.x_prime.len());
            assert_eq!(p.x[..SUBJECT_POS], p.x_prime[..SUBJECT_POS]);
            assert_eq!(p.x[OPTIONS_START..], p.x_prime[OPTIONS_START..]);
        }
        // counting rule on a relation whose facts all have distinct objects
        let mut w2 = w.clone();
        w2.config.relations = 1;
        w2.facts = (0..4)
            .map(|s| Fact {
                subject: s,
                relation: 0,
                object: s,
            })
            .collect();
        assert_eq!(pair_candidates(&w2).unwrap().len(), 12);
        w2.facts.iter_mut().for_each(|f| f.object = 0);
        assert!(pair_candidates(&w2).is_err());
    }

    #[test]
    fn self_patch_changes_nothing() {
        let w = world();
        let m = target(&w);
        let x = &w.prompts[0].ids;
        for c in chunks(4).unwrap() {
            for t in 0..x.len() {
                let o = patch_outcome(&m, x, x, t, &c).unwrap();
                assert!(!o.has_changed);
                assert_eq!(o.content, o.clean);
            }
        }
        assert!(patch_outcome(&m, x, x, x.len(), &[0]).is_err());
    }

    #[test]
    fn token_types_follow_the_prompt_layout() {
        let w = world();
        let p = &make_counterfactual_pairs(&w, Some(5), 2).unwrap()[0];
        let types: Vec<TokenType> = (0..p.x.len()).map(|t| p.token_type(&w, t)).collect();
        assert_eq!(types[0], TokenType::Other);
        assert_eq!(types[1..4], [TokenType::Relation; 3]);
        assert_eq!(types[4], TokenType::SubjectFinal);
        let count = |k| types.iter().filter(|&&t| t == k).count();
        assert_eq!(count(TokenType::OrigOption), 1);
        assert_eq!(count(TokenType::NewOption), 1);
        assert_eq!(count(TokenType::OtherOption), 3);
    }

    fn sample(tt: TokenType, chunk: usize, changed: bool, i: usize) -> PatchSample {
        PatchSample {
            id: format!("s{i}"),
            pair: i,
            x: vec![],
            x_prime: vec![],
            t: 0,
            token_type: tt,
            chunk,
            layers: vec![chunk],
            vector: vec![],
            has_changed: changed,
            content: 0,
        }
    }

    #[test]
    fn balancing_caps_cells_and_reports_empty_ones() {
        let mut s: Vec<PatchSample> = (0..10).map(|i| sample(TokenType::Relation, 1, true, i)).collect();
        s.extend((10..12).map(|i| sample(TokenType::Relation, 1, false, i)));
        let (kept, census) = balance_patch_dataset(&s, 2, 9);
        assert_eq!(kept.iter().filter(|k| k.has_changed).count(), 2);
        assert_eq!(kept.iter().filter(|k| !k.has_changed).count(), 2);
        assert_eq!(census.rows.len(), 24);
        assert!(census.is_balanced());
        let empty = census.rows.iter().find(|r| r.group == "subject-final" && r.chunk == Some(0)).unwrap();
        assert_eq!((empty.changed_raw, empty.changed_kept), (0, 0));
        let again = balance_patch_dataset(&s, 2, 9).0;
        assert_eq!(
            kept.iter().map(|k| &k.id).collect::<Vec<_>>(),
            again.iter().map(|k| &k.id).collect::<Vec<_>>()
        );
        assert!(census.to_csv().starts_with("group,chunk,"));
    }

    #[test]
    fn records_follow_ablations() {
        let w = world();
        let v = &w.vocab;
        let mut s = sample(TokenType::SubjectFinal, 2, false, 0);
        s.x = w.prompts[0].ids.clone();
        s.t = SUBJECT_POS;
        s.layers = vec![2];
        s.vector = vec![0.0; 16];
        s.content = v.id("unknown");
        let full = render_patch_record(v, &s, 0, Ablations::default()).unwrap();
        assert!(full.slot.is_some());
        assert!(full.prompt.contains(&v.id("layers")));
        let nl = render_patch_record(
            v,
            &s,
            0,
            Ablations {
                no_layer: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(nl.gold, full.gold);
        assert!(!nl.prompt.contains(&v.id("layers")));
        assert!(full.gold.contains(&v.id("remain")));
        let na = render_patch_record(
            v,
            &s,
            1,
            Ablations {
                no_activation: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(na.slot, None);
        assert!(na.example(false).slot.is_none());
    }

    #[test]
    fn location_records_point_at_their_source() {
        let w = world();
        let m = target(&w);
        let recs = build_location_dataset(&m, &w.vocab, &[w.prompts[0].ids.clone()]).unwrap();
        assert_eq!(recs.len(), 13 * 4);
        for r in &recs {
            assert_eq!(r.vector, chunk_vector(&m, &r.x, r.t, &r.layers).unwrap());
            assert_eq!(parse_location(&w.vocab, &r.gold), Some((r.t, r.layers.clone())));
            assert_eq!(chunk_of(&r.layers, 4), Some(r.chunk));
        }
    }

    #[test]
    fn labels_reproduce() {
        let w = world();
        let m = target(&w);
        let pairs = make_counterfactual_pairs(&w, Some(2), 0).unwrap();
        let (samples, invalid) = label_patch_samples(&m, &w, &pairs).unwrap();
        assert_eq!(samples.len() + invalid, 2 * 13 * 4);
        assert_eq!(reproduce_patch_labels(&m, &samples).unwrap(), 1.0);
    }
}
