// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature descriptions: simulator scoring, exhaustive label search,
//! explanation datasets, projection pre-training, explainer training and
//! description decoding.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::b64;
use crate::error::{Error, Result};
use crate::explain::{feature_explanation, feature_prompt, FEATURE_TEMPLATES};
use crate::labels::Grammar;
use crate::metrics::{map_layer, mean_stderr, pearson, LexicalJudge};
use crate::model::{LayerSet, TokenSeq, Transformer};
use crate::projection::{ProjectionMode, ProjectionSet};
use crate::sae::{activation_series, layer_taps, FeatureDirection};
use crate::tensor::Matrix;
use crate::train::{fine_tune, ExplanationExample, LossCurve, ProjectionTraining, SlotInput, TrainConfig};
use crate::vocab::Vocab;

/// Mean over inputs of `pearson(a_v(x, ·), simulate(label, x))`.
pub fn simulator_score(grammar: &Grammar, label: usize, acts: &[Vec<f32>], corpus: &[Vec<u32>]) -> Result<f64> {
    if corpus.is_empty() || acts.len() != corpus.len() {
        return Err(Error::Shape(format!(
            "need one activation series per input ({} vs {})",
            acts.len(),
            corpus.len()
        )));
    }
    let mut total = 0.0;
    for (a, x) in acts.iter().zip(corpus) {
        total += pearson(a, &grammar.simulate(label, x)?)?;
    }
    Ok(total / corpus.len() as f64)
}

/// A labeling corpus with the simulator's predictions cached per label.
pub struct LabelingCorpus<'g> {
    grammar: &'g Grammar,
    corpus: Vec<Vec<u32>>,
    /// `[label][input]`
    predicted: Vec<Vec<Vec<f32>>>,
}

impl<'g> LabelingCorpus<'g> {
    pub fn new(grammar: &'g Grammar, corpus: Vec<Vec<u32>>) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Dataset("labeling corpus is empty".into()));
        }
        let predicted = (0..grammar.len())
            .map(|l| corpus.iter().map(|x| grammar.simulate(l, x)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        Ok(Self {
            grammar,
            corpus,
            predicted,
        })
    }

    pub fn corpus(&self) -> &[Vec<u32>] {
        &self.corpus
    }

    pub fn grammar(&self) -> &Grammar {
        self.grammar
    }

    pub fn score(&self, label: usize, acts: &[Vec<f32>]) -> Result<f64> {
        let pred = self
            .predicted
            .get(label)
            .ok_or_else(|| Error::Label(format!("unknown label id {label}")))?;
        if acts.len() != pred.len() {
            return Err(Error::Shape("one activation series per corpus input required".into()));
        }
        let mut total = 0.0;
        for (a, p) in acts.iter().zip(pred) {
            total += pearson(a, p)?;
        }
        Ok(total / pred.len() as f64)
    }

    /// Exhaustive arg max over `candidates`; ties go to the
    /// lexicographically smallest rendering.
    pub fn best(&self, acts: &[Vec<f32>], candidates: &[usize]) -> Result<(usize, f64)> {
        let labels = self.grammar.labels();
        let mut best: Option<(usize, f64)> = None;
        for &c in candidates {
            let s = self.score(c, acts)?;
            best = match best {
                None => Some((c, s)),
                Some((b, bs)) => {
                    let tie = (s - bs).abs() <= 1e-12;
                    if (!tie && s > bs) || (tie && labels[c].text < labels[b].text) {
                        Some((c, s))
                    } else {
                        Some((b, bs))
                    }
                }
            };
        }
        best.ok_or_else(|| Error::Label("empty candidate set".into()))
    }
}

/// Best label for one feature given its activation series on the corpus.
pub fn label_feature(lc: &LabelingCorpus<'_>, acts: &[Vec<f32>], candidates: &[usize]) -> Result<(usize, f64)> {
    lc.best(acts, candidates)
}

/// A feature with its gold label and simulator score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledFeature {
    pub feature: FeatureDirection,
    pub label: usize,
    pub score: f64,
}

/// Labels every feature against the full grammar. Hidden states are
/// computed once per layer.
pub fn label_features(
    model: &Transformer,
    features: &[FeatureDirection],
    lc: &LabelingCorpus<'_>,
) -> Result<Vec<LabeledFeature>> {
    let candidates: Vec<usize> = (0..lc.grammar().len()).collect();
    let mut taps: BTreeMap<usize, Vec<Matrix>> = BTreeMap::new();
    let mut out = Vec::with_capacity(features.len());
    for f in features {
        if f.layer >= model.layers() {
            return Err(Error::Dataset(format!(
                "feature {} is at layer {} but the model has {} layers",
                f.id,
                f.layer,
                model.layers()
            )));
        }
        if !taps.contains_key(&f.layer) {
            taps.insert(f.layer, layer_taps(model, lc.corpus(), f.layer)?);
        }
        let acts = activation_series(&taps[&f.layer], &f.vector);
        let (label, score) = lc.best(&acts, &candidates)?;
        out.push(LabeledFeature {
            feature: f.clone(),
            label,
            score,
        });
    }
    Ok(out)
}

/// Train / held-out split of labeled features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSplit {
    pub train: Vec<LabeledFeature>,
    pub heldout: Vec<LabeledFeature>,
}

/// Holds out `per_layer` random features of every layer.
pub fn split_features(mut labeled: Vec<LabeledFeature>, per_layer: usize, seed: u64) -> FeatureSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labeled.sort_by(|a, b| (a.feature.layer, &a.feature.id).cmp(&(b.feature.layer, &b.feature.id)));
    let mut by_layer: BTreeMap<usize, Vec<LabeledFeature>> = BTreeMap::new();
    for f in labeled {
        by_layer.entry(f.feature.layer).or_default().push(f);
    }
    let mut split = FeatureSplit {
        train: Vec::new(),
        heldout: Vec::new(),
    };
    for (_, mut fs) in by_layer {
        fs.shuffle(&mut rng);
        let k = per_layer.min(fs.len());
        let rest = fs.split_off(k);
        split.heldout.extend(fs);
        split.train.extend(rest);
    }
    let key = |f: &LabeledFeature| (f.feature.layer, f.feature.id.clone());
    split.train.sort_by_key(key);
    split.heldout.sort_by_key(key);
    split
}

/// Random subset of `ceil(fraction * n)` features.
pub fn subsample(features: &[LabeledFeature], fraction: f64, seed: u64) -> Result<Vec<LabeledFeature>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} is not in (0, 1]")));
    }
    let k = (fraction * features.len() as f64).ceil() as usize;
    if k == 0 {
        return Err(Error::Dataset(format!("fraction {fraction} leaves no training records")));
    }
    let mut idx: Vec<usize> = (0..features.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| features[i].clone()).collect())
}

/// A `(q, E)` pair for one feature under one template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub feature_id: String,
    pub layer: usize,
    pub template: usize,
    pub prompt: Vec<u32>,
    pub slot: usize,
    pub label: usize,
    pub gold: Vec<u32>,
    #[serde(with = "b64")]
    pub vector: Vec<f32>,
}

impl FeatureRecord {
    pub fn example(&self, projected: bool) -> ExplanationExample {
        ExplanationExample {
            prompt: self.prompt.clone(),
            slot: Some(slot_input(self.slot, self.layer, &self.vector, projected)),
            explanation: self.gold.clone(),
        }
    }
}

pub(crate) fn slot_input(position: usize, layer: usize, vector: &[f32], projected: bool) -> SlotInput {
    if projected {
        SlotInput::Projected {
            position,
            layer,
            vector: vector.to_vec(),
        }
    } else {
        SlotInput::Raw {
            position,
            vector: vector.to_vec(),
        }
    }
}

fn record(vocab: &Vocab, grammar: &Grammar, f: &LabeledFeature, template: usize, layer_shown: usize) -> Result<FeatureRecord> {
    let p = feature_prompt(vocab, template, layer_shown)?;
    Ok(FeatureRecord {
        feature_id: f.feature.id.clone(),
        layer: f.feature.layer,
        template,
        slot: p.slots[0],
        prompt: p.ids,
        label: f.label,
        gold: feature_explanation(vocab, &grammar.get(f.label)?.tokens),
        vector: f.feature.vector.clone(),
    })
}

/// Training features under one uniformly drawn template each; held-out
/// features under every template.
pub fn build_feature_dataset(
    vocab: &Vocab,
    grammar: &Grammar,
    split: &FeatureSplit,
    seed: u64,
) -> Result<(Vec<FeatureRecord>, Vec<FeatureRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = split
        .train
        .iter()
        .map(|f| record(vocab, grammar, f, rng.gen_range(0..FEATURE_TEMPLATES), f.feature.layer))
        .collect::<Result<_>>()?;
    let mut heldout = Vec::new();
    for f in &split.heldout {
        for t in 0..FEATURE_TEMPLATES {
            heldout.push(record(vocab, grammar, f, t, f.feature.layer)?);
        }
    }
    Ok((train, heldout))
}

/// Result of fitting `h_E ≈ h_M @ P` per target layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentFit {
    pub projections: ProjectionSet,
    /// `||X P - Y||² / ||Y||²` per target layer.
    pub residuals: BTreeMap<usize, f64>,
    /// Layers that needed the ridge fallback.
    pub ridge_layers: Vec<usize>,
}

/// Least squares `min ||X P - Y||`. Falls back to ridge with
/// `λ = 1e-3 · tr(XᵀX) / d` when `XᵀX` is (near) singular.
pub fn fit_linear_map(x: &Matrix, y: &Matrix) -> Result<(Matrix, bool)> {
    if x.rows() != y.rows() || x.rows() == 0 {
        return Err(Error::Shape(format!(
            "alignment needs matching non-empty row counts ({} vs {})",
            x.rows(),
            y.rows()
        )));
    }
    let (n, d) = x.shape();
    let e = y.cols();
    let xm = DMatrix::from_row_iterator(n, d, x.data().iter().map(|&v| v as f64));
    let ym = DMatrix::from_row_iterator(n, e, y.data().iter().map(|&v| v as f64));
    let mut xtx = xm.transpose() * &xm;
    let xty = xm.transpose() * &ym;
    let eig = SymmetricEigen::new(xtx.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let ridge = !(max > 0.0 && min > 1e-9 * max);
    if ridge {
        let lambda = (1e-3 * xtx.trace() / d as f64).max(1e-12);
        for i in 0..d {
            xtx[(i, i)] += lambda;
        }
    }
    let p = xtx
        .cholesky()
        .ok_or_else(|| Error::Shape("alignment system is not positive definite".into()))?
        .solve(&xty);
    let data = (0..d).flat_map(|r| (0..e).map(move |c| (r, c))).map(|(r, c)| p[(r, c)] as f32).collect();
    Ok((Matrix::from_vec(d, e, data), ridge))
}

/// `||X P - Y||² / ||Y||²`.
pub fn relative_residual(x: &Matrix, y: &Matrix, p: &Matrix) -> f64 {
    let pred = x.matmul(p);
    let num: f64 = pred
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum();
    let den = y.sum_sq();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Stacked hidden states of every position of `corpus` at `layer`.
pub fn stacked_taps(model: &Transformer, corpus: &[Vec<u32>], layer: usize) -> Result<Matrix> {
    let per = layer_taps(model, corpus, layer)?;
    let d = model.hidden();
    let rows: usize = per.iter().map(Matrix::rows).sum();
    let data = per.into_iter().flat_map(Matrix::into_vec).collect();
    Ok(Matrix::from_vec(rows, d, data))
}

/// Per target layer, fits the explainer's hidden states at the
/// proportionally mapped layer from the target's.
pub fn pretrain_projection(target: &Transformer, explainer: &Transformer, corpus: &[Vec<u32>]) -> Result<AlignmentFit> {
    let mut maps = BTreeMap::new();
    let mut residuals = BTreeMap::new();
    let mut ridge_layers = Vec::new();
    for l in 0..target.layers() {
        let le = map_layer(l, target.layers(), explainer.layers());
        let x = stacked_taps(target, corpus, l)?;
        let y = stacked_taps(explainer, corpus, le)?;
        let (p, ridge) = fit_linear_map(&x, &y)?;
        residuals.insert(l, relative_residual(&x, &y, &p));
        if ridge {
            ridge_layers.push(l);
        }
        maps.insert(l, p);
    }
    Ok(AlignmentFit {
        projections: ProjectionSet { maps },
        residuals,
        ridge_layers,
    })
}

/// Fine-tunes an explainer on feature records. `projections` must be
/// `None` exactly when `mode` is [`ProjectionMode::Identity`].
pub fn train_explainer_feat(
    explainer: &mut Transformer,
    records: &[FeatureRecord],
    projections: Option<&mut ProjectionSet>,
    mode: ProjectionMode,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    train_with_projections(
        explainer,
        records.iter().map(|r| r.example(projections.is_some())).collect(),
        projections,
        mode,
        cfg,
    )
}

pub(crate) fn train_with_projections(
    explainer: &mut Transformer,
    examples: Vec<ExplanationExample>,
    projections: Option<&mut ProjectionSet>,
    mode: ProjectionMode,
    cfg: &TrainConfig,
) -> Result<LossCurve> {
    match (mode, projections) {
        (ProjectionMode::Identity, None) => {
            for e in &examples {
                if let Some(SlotInput::Raw { vector, .. }) = &e.slot {
                    if vector.len() != explainer.hidden() {
                        return Err(Error::Shape(format!(
                            "feature has {} dims, explainer expects {}",
                            vector.len(),
                            explainer.hidden()
                        )));
                    }
                }
            }
            fine_tune(explainer, &examples, cfg, None)
        }
        (ProjectionMode::Identity, Some(_)) => Err(Error::Config("identity mode takes no projection set".into())),
        (_, None) => Err(Error::Config(format!("mode `{}` needs a projection set", mode.name()))),
        (m, Some(set)) => fine_tune(
            explainer,
            &examples,
            cfg,
            Some(ProjectionTraining {
                set,
                trainable: m.trainable(),
            }),
        ),
    }
}

/// Slot vector as seen by the explainer.
pub fn explainer_slot(projections: Option<&ProjectionSet>, layer: usize, v: &[f32]) -> Result<Vec<f32>> {
    match projections {
        Some(p) => p.project(layer, v),
        None => Ok(v.to_vec()),
    }
}

/// Greedy description of `v` at `layer` (end token removed).
pub fn describe(
    explainer: &Transformer,
    vocab: &Vocab,
    projections: Option<&ProjectionSet>,
    v: &[f32],
    layer: usize,
    template: usize,
) -> Result<Vec<u32>> {
    let p = feature_prompt(vocab, template, layer)?;
    let slot = explainer_slot(projections, layer, v)?;
    let seq = TokenSeq::new(p.ids).with_slot(p.slots[0], slot);
    let mut out = explainer.generate(&seq, 4, vocab.eos())?;
    if out.last() == Some(&vocab.eos()) {
        out.pop();
    }
    Ok(out)
}

/// Per-feature scores of predicted descriptions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureScores {
    pub feature_ids: Vec<String>,
    pub judge: Vec<f64>,
    pub simulator: Vec<f64>,
}

impl FeatureScores {
    pub fn judge_mean(&self) -> (f64, f64) {
        mean_stderr(&self.judge)
    }

    pub fn simulator_mean(&self) -> (f64, f64) {
        mean_stderr(&self.simulator)
    }
}

/// Scores predictions per feature (averaged over however many
/// predictions a feature has, e.g. one per template). Predictions outside
/// the grammar score 0 on both metrics.
pub fn score_predictions(
    judge: &LexicalJudge<'_>,
    lc: &LabelingCorpus<'_>,
    model: &Transformer,
    items: &[(LabeledFeature, Vec<Vec<u32>>)],
) -> Result<FeatureScores> {
    let mut taps: BTreeMap<usize, Vec<Matrix>> = BTreeMap::new();
    let mut out = FeatureScores::default();
    for (f, preds) in items {
        let layer = f.feature.layer;
        if !taps.contains_key(&layer) {
            taps.insert(layer, layer_taps(model, lc.corpus(), layer)?);
        }
        let acts = activation_series(&taps[&layer], &f.feature.vector);
        let gold = &lc.grammar().get(f.label)?.tokens;
        let (mut j, mut s) = (0.0, 0.0);
        for p in preds {
            j += judge.score(p, gold);
            s += match lc.grammar().parse(p) {
                Some(id) => lc.score(id, &acts)?,
                None => 0.0,
            };
        }
        let k = preds.len().max(1) as f64;
        out.feature_ids.push(f.feature.id.clone());
        out.judge.push(j / k);
        out.simulator.push(s / k);
    }
    Ok(out)
}

/// Describes every held-out feature under every template.
pub fn describe_all(
    explainer: &Transformer,
    vocab: &Vocab,
    projections: Option<&ProjectionSet>,
    features: &[LabeledFeature],
    layer_shift: usize,
) -> Result<Vec<(LabeledFeature, Vec<Vec<u32>>)>> {
    features
        .iter()
        .map(|f| {
            let shown = (f.feature.layer + layer_shift) % explainer.layers().max(1);
            let preds = (0..FEATURE_TEMPLATES)
                .map(|t| describe_shown(explainer, vocab, projections, f, shown, t))
                .collect::<Result<Vec<_>>>()?;
            Ok((f.clone(), preds))
        })
        .collect()
}

fn describe_shown(
    explainer: &Transformer,
    vocab: &Vocab,
    projections: Option<&ProjectionSet>,
    f: &LabeledFeature,
    shown_layer: usize,
    template: usize,
) -> Result<Vec<u32>> {
    let p = feature_prompt(vocab, template, shown_layer)?;
    let slot = explainer_slot(projections, f.feature.layer, &f.feature.vector)?;
    let seq = TokenSeq::new(p.ids).with_slot(p.slots[0], slot);
    let mut out = explainer.generate(&seq, 4, vocab.eos())?;
    if out.last() == Some(&vocab.eos()) {
        out.pop();
    }
    Ok(out)
}

/// Fraction of features whose template-0 description is unchanged when
/// the prompt names a wrong layer.
pub fn layer_invariance(
    explainer: &Transformer,
    vocab: &Vocab,
    projections: Option<&ProjectionSet>,
    features: &[LabeledFeature],
) -> Result<f64> {
    if features.is_empty() {
        return Ok(0.0);
    }
    let layers = explainer.layers();
    let mut same = 0;
    for f in features {
        let right = describe_shown(explainer, vocab, projections, f, f.feature.layer, 0)?;
        let wrong = describe_shown(explainer, vocab, projections, f, (f.feature.layer + 1) % layers, 0)?;
        same += usize::from(right == wrong);
    }
    Ok(same as f64 / features.len() as f64)
}

/// Hidden states of `model` on `corpus` at every layer (for alignment checks).
pub fn all_layer_taps(model: &Transformer, corpus: &[Vec<u32>]) -> Result<Vec<BTreeMap<usize, Matrix>>> {
    corpus
        .iter()
        .map(|x| Ok(model.forward(&TokenSeq::new(x.clone()), &LayerSet::all(model.layers()))?.hidden))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sae::Source;
    use crate::vocab::VocabSizes;

    fn vocab() -> Vocab {
        Vocab::build(VocabSizes {
            subjects: 16,
            relations: 3,
            objects_per_relation: 6,
            positions: 16,
        })
        .unwrap()
    }

    #[test]
    fn simulator_score_reference_cases() {
        let v = vocab();
        let g = Grammar::build(&v);
        let digits = g.parse(&[v.id("digits")]).unwrap();
        let x = vec![v.id("the"), v.id("7"), v.id("of"), v.id("3")];
        let planted: Vec<f32> = g.simulate(digits, &x).unwrap();
        let s = simulator_score(&g, digits, &[planted.clone()], &[x.clone()]).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let letters = g.parse(&[v.id("letters")]).unwrap();
        assert_eq!(simulator_score(&g, letters, &[planted.clone()], &[x.clone()]).unwrap(), 0.0);

        let lc = LabelingCorpus::new(&g, vec![x]).unwrap();
        assert_eq!(label_feature(&lc, &[planted], &[letters, digits]).unwrap().0, digits);
        assert!(lc.best(&[vec![0.0; 4]], &[]).is_err());
    }

    #[test]
    fn ties_prefer_the_smaller_rendering() {
        let v = vocab();
        let g = Grammar::build(&v);
        let lc = LabelingCorpus::new(&g, vec![v.ids(&["the", "of"])]).unwrap();
        // constant activations correlate with nothing, so every label ties at 0
        let all: Vec<usize> = (0..g.len()).collect();
        let (best, score) = lc.best(&[vec![1.0, 1.0]], &all).unwrap();
        assert_eq!(score, 0.0);
        let smallest = g.labels().iter().map(|l| l.text.clone()).min().unwrap();
        assert_eq!(g.get(best).unwrap().text, smallest);
    }

    fn model(seed: u64, hidden: usize) -> Transformer {
        Transformer::new(ModelConfig {
            layers: 4,
            hidden,
            heads: 2,
            vocab: 12,
            context: 8,
            mlp_ratio: 2,
            seed,
            rescale_slots: false,
        })
        .unwrap()
    }

    #[test]
    fn self_alignment_is_exact() {
        let m = model(1, 8);
        let corpus: Vec<Vec<u32>> = (0..20).map(|i| vec![1, (i % 10) as u32 + 2, 3, (i * 7 % 10) as u32 + 1]).collect();
        let fit = pretrain_projection(&m, &m, &corpus).unwrap();
        for r in fit.residuals.values() {
            assert!(*r < 1e-6, "{fit:?}");
        }
    }

    #[test]
    fn ridge_fallback_on_rank_deficient_data() {
        let x = Matrix::from_vec(4, 2, vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 4.0, 8.0]);
        let y = Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let (p, ridge) = fit_linear_map(&x, &y).unwrap();
        assert!(ridge);
        assert!(p.all_finite());
        assert!(relative_residual(&x, &y, &p) < 1e-3);
    }

    #[test]
    fn identity_mode_matches_plain_fine_tuning() {
        let v = vocab();
        let g = Grammar::build(&v);
        let mut cfg = ModelConfig {
            layers: 4,
            hidden: 8,
            heads: 2,
            vocab: v.len(),
            context: 16,
            mlp_ratio: 2,
            seed: 3,
            rescale_slots: false,
        };
        cfg.seed = 3;
        let base = Transformer::new(cfg).unwrap();
        let f = LabeledFeature {
            feature: FeatureDirection {
                id: "f".into(),
                layer: 1,
                source: Source::Sae,
                vector: vec![0.5; 8],
            },
            label: g.parse(&[v.id("digits")]).unwrap(),
            score: 1.0,
        };
        let split = FeatureSplit {
            train: vec![f.clone()],
            heldout: vec![],
        };
        let (train, _) = build_feature_dataset(&v, &g, &split, 0).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let mut a = base.clone();
        let la = train_explainer_feat(&mut a, &train, None, ProjectionMode::Identity, &tc).unwrap();
        let mut b = base.clone();
        let mut ident = ProjectionSet::identity(4, 8);
        let lb = train_explainer_feat(&mut b, &train, Some(&mut ident), ProjectionMode::Frozen, &tc).unwrap();
        assert_eq!(la, lb);
        let mut c = base.clone();
        let plain: Vec<ExplanationExample> = train.iter().map(|r| r.example(false)).collect();
        assert_eq!(fine_tune(&mut c, &plain, &tc, None).unwrap(), la);
        assert!(train_explainer_feat(&mut c, &train, Some(&mut ident), ProjectionMode::Identity, &tc).is_err());
    }

    #[test]
    fn splits_and_subsamples() {
        let mk = |layer, i| LabeledFeature {
            feature: FeatureDirection {
                id: format!("f{layer}-{i:03}"),
                layer,
                source: Source::Sae,
                vector: vec![1.0],
            },
            label: 0,
            score: 0.5,
        };
        let all: Vec<_> = (0..100).map(|i| mk(0, i)).collect();
        let s = split_features(all, 16, 1);
        assert_eq!((s.train.len(), s.heldout.len()), (84, 16));
        assert_eq!(subsample(&s.train, 0.125, 0).unwrap().len(), 11);
        assert_eq!(subsample(&s.train, 0.008, 0).unwrap().len(), 1);
        assert!(subsample(&s.train, 0.0, 0).is_err());
        assert!(subsample(&[], 0.5, 0).is_err());
        assert_eq!(s, split_features(s.train.iter().chain(&s.heldout).cloned().collect(), 16, 1));
    }

    #[test]
    fn describe_is_total_and_deterministic() {
        let v = vocab();
        let m = Transformer::new(ModelConfig {
            layers: 4,
            hidden: 8,
            heads: 2,
            vocab: v.len(),
            context: 16,
            mlp_ratio: 2,
            seed: 2,
            rescale_slots: false,
        })
        .unwrap();
        let zero = vec![0.0; 8];
        let a = describe(&m, &v, None, &zero, 2, 1).unwrap();
        assert_eq!(a, describe(&m, &v, None, &zero, 2, 1).unwrap());
        assert!(a.len() <= 4);
    }
}
