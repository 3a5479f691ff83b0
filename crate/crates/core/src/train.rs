// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded, single-threaded training loops: next-token pre-training of the
//! target and masked fine-tuning of explainers (optionally together with
//! per-layer projections).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{SlotVar, Transformer};
use crate::projection::ProjectionSet;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    pub grad_clip: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 3e-3,
            warmup_steps: 20,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub losses: Vec<f32>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }

    pub fn last(&self) -> Option<f32> {
        self.losses.last().copied()
    }

    /// Mean of the final `n` losses.
    pub fn tail_mean(&self, n: usize) -> f32 {
        let k = n.min(self.losses.len()).max(1);
        self.losses.iter().rev().take(k).sum::<f32>() / k as f32
    }
}

/// Adam with bias correction and global-norm clipping.
pub struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
    beta1: f32,
    beta2: f32,
    eps: f32,
}

impl Adam {
    pub fn new(shapes: &[Matrix]) -> Self {
        let z = |ms: &[Matrix]| ms.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        Self {
            m: z(shapes),
            v: z(shapes),
            t: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &mut [Matrix], lr: f32, clip: f32) {
        let norm = grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt() as f32;
        if clip > 0.0 && norm > clip {
            let s = clip / norm;
            grads.iter_mut().for_each(|g| g.scale(s));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Linear warmup, then cosine decay to a tenth of the peak at `total`.
fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f32 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f32 / cfg.warmup_steps as f32;
    }
    let span = total.saturating_sub(cfg.warmup_steps).max(1);
    let progress = ((step - cfg.warmup_steps) as f32 / span as f32).min(1.0);
    let floor = 0.1 * cfg.lr;
    floor + (cfg.lr - floor) * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
}

/// Where the continuous token of an explanation example comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum SlotInput {
    /// Inserted as-is.
    Raw { position: usize, vector: Vec<f32> },
    /// Inserted as `vector @ P[layer]`.
    Projected {
        position: usize,
        layer: usize,
        vector: Vec<f32>,
    },
}

/// A question `q` (with optional continuous token) and explanation `E`.
/// Only the tokens of `E` are scored.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationExample {
    pub prompt: Vec<u32>,
    pub slot: Option<SlotInput>,
    pub explanation: Vec<u32>,
}

impl ExplanationExample {
    pub fn ids(&self) -> Vec<u32> {
        let mut ids = self.prompt.clone();
        ids.extend_from_slice(&self.explanation);
        ids
    }

    /// Next-token targets, present only where the predicted token is in `E`.
    pub fn targets(&self) -> Vec<Option<u32>> {
        let ids = self.ids();
        (0..ids.len())
            .map(|t| {
                let next = t + 1;
                (next >= self.prompt.len() && next < ids.len()).then(|| ids[next])
            })
            .collect()
    }
}

/// Projections as seen by the trainer.
pub struct ProjectionTraining<'p> {
    pub set: &'p mut ProjectionSet,
    pub trainable: bool,
}

fn lm_targets(seq: &[u32]) -> Vec<Option<u32>> {
    (0..seq.len())
        .map(|t| seq.get(t + 1).copied())
        .collect()
}

/// Next-token pre-training over a tokenized corpus.
pub fn train_lm(model: &mut Transformer, corpus: &[Vec<u32>], cfg: &TrainConfig) -> Result<LossCurve> {
    if corpus.is_empty() || cfg.epochs == 0 {
        return Err(Error::EmptyObjective("empty corpus or zero epochs".into()));
    }
    for seq in corpus {
        model.check_seq(&crate::model::TokenSeq::new(seq.clone()))?;
    }
    let examples: Vec<(Vec<u32>, Vec<Option<u32>>)> =
        corpus.iter().map(|s| (s.clone(), lm_targets(s))).collect();
    run_training(model, None, &examples, cfg, |_, _| Ok(Vec::new()))
}

/// Masked fine-tuning on `(q, E)` pairs. With `projections`, slot vectors
/// of [`SlotInput::Projected`] examples pass through the per-layer map,
/// which is updated too when `trainable`.
pub fn fine_tune(
    model: &mut Transformer,
    dataset: &[ExplanationExample],
    cfg: &TrainConfig,
    projections: Option<ProjectionTraining<'_>>,
) -> Result<LossCurve> {
    if dataset.iter().all(|e| e.targets().iter().all(Option::is_none)) {
        return Err(Error::EmptyObjective(
            "dataset has no explanation tokens to train on".into(),
        ));
    }
    for e in dataset {
        let seq = crate::model::TokenSeq::new(e.ids());
        model.check_seq(&seq)?;
        if let Some(SlotInput::Projected { .. }) = &e.slot {
            if projections.is_none() {
                return Err(Error::Shape("projected slot without a projection set".into()));
            }
        }
    }
    let examples: Vec<(Vec<u32>, Vec<Option<u32>>)> =
        dataset.iter().map(|e| (e.ids(), e.targets())).collect();
    run_training(model, projections, &examples, cfg, |i, _| {
        Ok(dataset[i].slot.clone().into_iter().collect())
    })
}

/// Next-token loss of one sequence and its gradient for every model
/// parameter, in [`crate::model::ParamStore`] order.
pub fn lm_loss_and_gradients(model: &Transformer, seq: &[u32]) -> Result<(f32, Vec<Matrix>)> {
    model.check_seq(&crate::model::TokenSeq::new(seq.to_vec()))?;
    let mut grads = model.params().zeros_like();
    let mut g = Graph::new();
    let built = model.build(&mut g, seq, Vec::new(), &[], Some(0));
    let loss = g.cross_entropy(built.logits, &lm_targets(seq));
    g.backward(loss, &mut grads);
    Ok((g.value(loss).data()[0], grads))
}

/// Loss of a single explanation example (no parameter update).
pub fn example_loss(
    model: &Transformer,
    example: &ExplanationExample,
    projections: Option<&ProjectionSet>,
) -> Result<f32> {
    let mut g = Graph::new();
    let slots = resolve_slots(&mut g, example.slot.iter().cloned().collect(), projections, None)?;
    let built = model.build(&mut g, &example.ids(), slots, &[], None);
    let loss = g.cross_entropy(built.logits, &example.targets());
    Ok(g.value(loss).data()[0])
}

fn resolve_slots<'a>(
    g: &mut Graph<'a>,
    slots: Vec<SlotInput>,
    projections: Option<&'a ProjectionSet>,
    proj_grad_base: Option<usize>,
) -> Result<Vec<(usize, SlotVar)>> {
    let mut out = Vec::with_capacity(slots.len());
    for s in slots {
        match s {
            SlotInput::Raw { position, vector } => out.push((position, SlotVar::Fixed(vector))),
            SlotInput::Projected {
                position,
                layer,
                vector,
            } => {
                let set = projections
                    .ok_or_else(|| Error::Shape("projected slot without a projection set".into()))?;
                let p = set.get(layer)?;
                if p.rows() != vector.len() {
                    return Err(Error::Shape(format!(
                        "feature has {} dims, projection expects {}",
                        vector.len(),
                        p.rows()
                    )));
                }
                let pv = match proj_grad_base {
                    Some(base) => {
                        let slot = base + set.maps.keys().position(|&k| k == layer).unwrap_or(0);
                        g.param(p, slot)
                    }
                    None => g.frozen(p),
                };
                let v = g.constant(Matrix::row_vector(vector));
                let projected = g.matmul(v, pv);
                out.push((position, SlotVar::Node(projected)));
            }
        }
    }
    Ok(out)
}

fn run_training<F>(
    model: &mut Transformer,
    mut projections: Option<ProjectionTraining<'_>>,
    examples: &[(Vec<u32>, Vec<Option<u32>>)],
    cfg: &TrainConfig,
    slots_for: F,
) -> Result<LossCurve>
where
    F: Fn(usize, &[u32]) -> Result<Vec<SlotInput>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_model = model.params().tensors.len();
    let proj_trainable = projections.as_ref().is_some_and(|p| p.trainable);
    let n_proj = if proj_trainable {
        projections.as_ref().map_or(0, |p| p.set.maps.len())
    } else {
        0
    };
    let mut shapes = model.params().zeros_like();
    if let Some(p) = projections.as_ref().filter(|p| p.trainable) {
        shapes.extend(p.set.maps.values().map(|m| Matrix::zeros(m.rows(), m.cols())));
    }
    let mut adam = Adam::new(&shapes);
    let mut curve = LossCurve::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let batch = cfg.batch_size.max(1);
    let total_steps = cfg.epochs * examples.len().div_ceil(batch);
    let mut step = 0;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grads: Vec<Matrix> = shapes.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
            let mut batch_loss = 0.0f32;
            for &i in chunk {
                let (ids, targets) = &examples[i];
                let slot_inputs = slots_for(i, ids)?;
                let mut g = Graph::new();
                let proj_ref = projections.as_ref().map(|p| &*p.set);
                let slots = resolve_slots(
                    &mut g,
                    slot_inputs,
                    proj_ref,
                    proj_trainable.then_some(n_model),
                )?;
                let built = model.build(&mut g, ids, slots, &[], Some(0));
                let loss = g.cross_entropy(built.logits, targets);
                let l = g.value(loss).data()[0];
                if !l.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        detail: format!("non-finite loss {l} on example {i}"),
                    });
                }
                batch_loss += l;
                g.backward(loss, &mut grads);
            }
            let inv = 1.0 / chunk.len() as f32;
            grads.iter_mut().for_each(|g| g.scale(inv));
            batch_loss *= inv;
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Diverged {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            let lr = lr_at(cfg, step, total_steps);
            {
                let mut params: Vec<&mut Matrix> = model.params_mut().tensors.iter_mut().collect();
                if let Some(p) = projections.as_mut().filter(|p| p.trainable) {
                    params.extend(p.set.maps.values_mut());
                }
                debug_assert_eq!(params.len(), n_model + n_proj);
                adam.step(&mut params, &mut grads, lr, cfg.grad_clip);
            }
            curve.losses.push(batch_loss);
            step += 1;
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TokenSeq};

    fn model(seed: u64, vocab: usize) -> Transformer {
        Transformer::new(ModelConfig {
            layers: 4,
            hidden: 16,
            heads: 2,
            vocab,
            context: 12,
            mlp_ratio: 2,
            seed,
            rescale_slots: false,
        })
        .unwrap()
    }

    #[test]
    fn targets_cover_only_explanation_tokens() {
        let e = ExplanationExample {
            prompt: vec![1, 2, 3],
            slot: None,
            explanation: vec![7, 8],
        };
        assert_eq!(e.targets(), vec![None, None, Some(7), Some(8), None]);
    }

    #[test]
    fn fully_masked_dataset_is_rejected() {
        let mut m = model(0, 10);
        let e = ExplanationExample {
            prompt: vec![1, 2, 3],
            slot: None,
            explanation: vec![],
        };
        let err = fine_tune(&mut m, &[e], &TrainConfig::default(), None);
        assert!(matches!(err, Err(Error::EmptyObjective(_))));
    }

    #[test]
    fn fully_masked_step_leaves_weights_unchanged() {
        let m = model(1, 10);
        let mut g = Graph::new();
        let built = m.build(&mut g, &[1, 2, 3], Vec::new(), &[], Some(0));
        let loss = g.cross_entropy(built.logits, &[None, None, None]);
        assert_eq!(g.value(loss).data()[0], 0.0);
        let mut grads = m.params().zeros_like();
        g.backward(loss, &mut grads);
        assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        let mut trained = m.clone();
        let mut adam = Adam::new(&grads);
        let mut params: Vec<&mut Matrix> = trained.params_mut().tensors.iter_mut().collect();
        adam.step(&mut params, &mut grads, 1e-2, 1.0);
        assert_eq!(trained, m);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus: Vec<Vec<u32>> = (0..8).map(|i| vec![1, 2 + i % 3, 5, 6 + i % 2]).collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut a = model(3, 10);
        let mut b = model(3, 10);
        let ca = train_lm(&mut a, &corpus, &cfg).unwrap();
        let cb = train_lm(&mut b, &corpus, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
    }

    #[test]
    fn overfit_single_pair_reproduces_explanation() {
        let mut m = model(4, 12);
        let e = ExplanationExample {
            prompt: vec![1, 3, 5],
            slot: None,
            explanation: vec![9, 4, 2],
        };
        let cfg = TrainConfig {
            epochs: 150,
            batch_size: 1,
            lr: 1e-2,
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        fine_tune(&mut m, &[e], &cfg, None).unwrap();
        let out = m.generate(&TokenSeq::new(vec![1, 3, 5]), 3, 2).unwrap();
        assert_eq!(out, vec![9, 4, 2]);
    }
}
