// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm decoder-only transformer with residual-stream taps,
//! continuous-token slots and activation-patching hooks.
//!
//! `h[l]` is the residual stream *after* layer `l` (attention + MLP).
//! Token embeddings are tied to the output projection.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub context: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
    /// Rescale slot vectors to the RMS norm of the embedding table.
    #[serde(default)]
    pub rescale_slots: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if self.layers < 4 {
            return Err(Error::Config(format!(
                "need at least 4 layers for four layer chunks, got {}",
                self.layers
            )));
        }
        Ok(())
    }

    /// Every rule except the four-chunk depth minimum.
    pub fn validate_shape(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("need at least one layer".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.vocab == 0 || self.context == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("vocab, context and mlp ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.hidden * self.mlp_ratio
    }
}

/// Token ids plus continuous vectors that replace the embedding at some
/// positions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub slots: Vec<(usize, Vec<f32>)>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        Self {
            ids,
            slots: Vec::new(),
        }
    }

    pub fn with_slot(mut self, position: usize, vector: Vec<f32>) -> Self {
        self.slots.push((position, vector));
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Which layers to record. Logits are always returned.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerSet(BTreeSet<usize>);

impl LayerSet {
    pub fn none() -> Self {
        Self(BTreeSet::new())
    }

    pub fn all(layers: usize) -> Self {
        Self((0..layers).collect())
    }

    pub fn of(layers: &[usize]) -> Self {
        Self(layers.iter().copied().collect())
    }

    pub fn contains(&self, l: usize) -> bool {
        self.0.contains(&l)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }
}

/// Output of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualTrace {
    /// Per tapped layer, a `[seq_len, hidden]` matrix of residual vectors.
    pub hidden: BTreeMap<usize, Matrix>,
    /// `[seq_len, vocab]`.
    pub logits: Matrix,
}

impl ResidualTrace {
    /// `h_{l,t}`. Panics if layer `l` was not tapped.
    pub fn at(&self, layer: usize, position: usize) -> &[f32] {
        self.hidden[&layer].row(position)
    }

    /// Greedy next token predicted at `position` (lowest id wins ties).
    pub fn argmax_at(&self, position: usize) -> u32 {
        argmax(self.logits.row(position)) as u32
    }

    pub fn last_argmax(&self) -> u32 {
        self.argmax_at(self.logits.rows() - 1)
    }
}

/// Overwrite the residual stream at `position` after each listed layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Intervention {
    pub layers: Vec<usize>,
    pub position: usize,
    pub vector: Vec<f32>,
}

/// Parameter tensors with stable names; order defines gradient slots.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Matrix>,
}

impl ParamStore {
    fn push(&mut self, name: impl Into<String>, m: Matrix) -> usize {
        self.names.push(name.into());
        self.tensors.push(m);
        self.tensors.len() - 1
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.tensors
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

/// Decoder-only transformer. Immutable once trained; `&Transformer` is the
/// read-only handle shared across inference workers.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    config: ModelConfig,
    params: ParamStore,
    tok_emb: usize,
    pos_emb: usize,
    layer_idx: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
}

/// Where a slot's vector comes from when building a graph.
pub(crate) enum SlotVar {
    Fixed(Vec<f32>),
    Node(Var),
}

pub(crate) struct Built {
    pub logits: Var,
    pub layers: Vec<Var>,
}

impl Transformer {
    /// Fresh model with seeded Gaussian init.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::init(config))
    }

    /// Model with fewer than four layers, for small numerical checks.
    /// Patching and chunked experiments reject it.
    pub fn new_shallow(config: ModelConfig) -> Result<Self> {
        config.validate_shape()?;
        Ok(Self::init(config))
    }

    fn init(config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden;
        let f = config.mlp_hidden();
        let std = 0.02f32;
        let proj_std = std / (2.0 * config.layers as f32).sqrt();
        let mut params = ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        };
        let tok_emb = params.push("tok_emb", Matrix::randn(config.vocab, d, std, &mut rng));
        let pos_emb = params.push("pos_emb", Matrix::randn(config.context, d, std, &mut rng));
        let mut layer_idx = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layer_idx.push(LayerIdx {
                ln1_g: params.push(p("ln1.g"), Matrix::filled(1, d, 1.0)),
                ln1_b: params.push(p("ln1.b"), Matrix::zeros(1, d)),
                wq: params.push(p("attn.wq"), Matrix::randn(d, d, std, &mut rng)),
                wk: params.push(p("attn.wk"), Matrix::randn(d, d, std, &mut rng)),
                wv: params.push(p("attn.wv"), Matrix::randn(d, d, std, &mut rng)),
                wo: params.push(p("attn.wo"), Matrix::randn(d, d, proj_std, &mut rng)),
                bo: params.push(p("attn.bo"), Matrix::zeros(1, d)),
                ln2_g: params.push(p("ln2.g"), Matrix::filled(1, d, 1.0)),
                ln2_b: params.push(p("ln2.b"), Matrix::zeros(1, d)),
                w_fc: params.push(p("mlp.w_fc"), Matrix::randn(d, f, std, &mut rng)),
                b_fc: params.push(p("mlp.b_fc"), Matrix::zeros(1, f)),
                w_proj: params.push(p("mlp.w_proj"), Matrix::randn(f, d, proj_std, &mut rng)),
                b_proj: params.push(p("mlp.b_proj"), Matrix::zeros(1, d)),
            });
        }
        let lnf_g = params.push("ln_f.g", Matrix::filled(1, d, 1.0));
        let lnf_b = params.push("ln_f.b", Matrix::zeros(1, d));
        Self {
            config,
            params,
            tok_emb,
            pos_emb,
            layer_idx,
            lnf_g,
            lnf_b,
        }
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint).
    pub fn from_params(config: ModelConfig, names: &[String], tensors: Vec<Matrix>) -> Result<Self> {
        config.validate_shape()?;
        let mut model = Self::init(config);
        if names != model.params.names.as_slice() {
            return Err(Error::Format("parameter names do not match the architecture".into()));
        }
        for (slot, t) in model.params.tensors.iter_mut().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {:?} vs expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_rescale_slots(&mut self, on: bool) {
        self.config.rescale_slots = on;
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    /// Token embedding row `k`.
    pub fn embedding(&self, token: u32) -> &[f32] {
        self.params.tensors[self.tok_emb].row(token as usize)
    }

    pub fn embedding_rms(&self) -> f32 {
        let e = &self.params.tensors[self.tok_emb];
        (e.sum_sq() / e.len() as f64).sqrt() as f32 * (e.cols() as f32).sqrt()
    }

    pub(crate) fn check_seq(&self, seq: &TokenSeq) -> Result<()> {
        if seq.len() > self.config.context {
            return Err(Error::ContextOverflow {
                len: seq.len(),
                context: self.config.context,
            });
        }
        if let Some(&bad) = seq.ids.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::UnknownToken(bad));
        }
        let mut last = None;
        for (pos, v) in &seq.slots {
            if *pos >= seq.len() || last.is_some_and(|l| l >= *pos) {
                return Err(Error::Shape(format!(
                    "slot positions must be strictly increasing and inside the sequence (got {pos})"
                )));
            }
            if v.len() != self.config.hidden {
                return Err(Error::Shape(format!(
                    "slot vector has {} dims, model hidden size is {}",
                    v.len(),
                    self.config.hidden
                )));
            }
            last = Some(*pos);
        }
        Ok(())
    }

    fn check_interventions(&self, seq_len: usize, interventions: &[Intervention]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for iv in interventions {
            if iv.position >= seq_len {
                return Err(Error::Intervention(format!(
                    "position {} outside sequence of length {seq_len}",
                    iv.position
                )));
            }
            if iv.vector.len() != self.config.hidden {
                return Err(Error::Intervention(format!(
                    "replacement has {} dims, expected {}",
                    iv.vector.len(),
                    self.config.hidden
                )));
            }
            for &l in &iv.layers {
                if l >= self.config.layers {
                    return Err(Error::Intervention(format!("layer {l} out of range")));
                }
                if !seen.insert((l, iv.position)) {
                    return Err(Error::Intervention(format!(
                        "conflicting interventions at layer {l}, position {}",
                        iv.position
                    )));
                }
            }
        }
        Ok(())
    }

    fn slot_vector(&self, v: &[f32]) -> Vec<f32> {
        if !self.config.rescale_slots {
            return v.to_vec();
        }
        let n = crate::tensor::norm(v);
        if n == 0.0 {
            return v.to_vec();
        }
        let s = self.embedding_rms() / n;
        v.iter().map(|x| x * s).collect()
    }

    /// Records the forward pass on `g`. `grad_base` offsets gradient slots
    /// when the model is trainable; `None` records weights as frozen.
    pub(crate) fn build<'a>(
        &'a self,
        g: &mut Graph<'a>,
        ids: &[u32],
        slots: Vec<(usize, SlotVar)>,
        interventions: &[Intervention],
        grad_base: Option<usize>,
    ) -> Built {
        let p = &self.params.tensors;
        let w = |i: usize, g: &mut Graph<'a>| match grad_base {
            Some(base) => g.param(&p[i], base + i),
            None => g.frozen(&p[i]),
        };
        let n = ids.len();
        let heads = self.config.heads;

        let tok = w(self.tok_emb, g);
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let mut x = g.gather(tok, &idx);
        if !slots.is_empty() {
            let rows: Vec<(usize, Var)> = slots
                .into_iter()
                .map(|(pos, s)| {
                    let v = match s {
                        SlotVar::Fixed(v) => g.constant(Matrix::row_vector(self.slot_vector(&v))),
                        SlotVar::Node(v) => v,
                    };
                    (pos, v)
                })
                .collect();
            x = g.replace_rows(x, &rows);
        }
        let pos = w(self.pos_emb, g);
        let positions: Vec<usize> = (0..n).collect();
        let pe = g.gather(pos, &positions);
        x = g.add(x, pe);

        let mut by_layer: BTreeMap<usize, Vec<(usize, &[f32])>> = BTreeMap::new();
        for iv in interventions {
            for &l in &iv.layers {
                by_layer.entry(l).or_default().push((iv.position, &iv.vector));
            }
        }

        let mut layer_out = Vec::with_capacity(self.layer_idx.len());
        for (l, li) in self.layer_idx.iter().enumerate() {
            let (g1, b1) = (w(li.ln1_g, g), w(li.ln1_b, g));
            let h = g.layer_norm(x, g1, b1);
            let (wq, wk, wv) = (w(li.wq, g), w(li.wk, g), w(li.wv, g));
            let q = g.matmul(h, wq);
            let k = g.matmul(h, wk);
            let v = g.matmul(h, wv);
            let a = g.causal_attention(q, k, v, heads);
            let (wo, bo) = (w(li.wo, g), w(li.bo, g));
            let a = g.matmul(a, wo);
            let a = g.add_row(a, bo);
            x = g.add(x, a);

            let (g2, b2) = (w(li.ln2_g, g), w(li.ln2_b, g));
            let h = g.layer_norm(x, g2, b2);
            let (wf, bf) = (w(li.w_fc, g), w(li.b_fc, g));
            let m = g.matmul(h, wf);
            let m = g.add_row(m, bf);
            let m = g.gelu(m);
            let (wp, bp) = (w(li.w_proj, g), w(li.b_proj, g));
            let m = g.matmul(m, wp);
            let m = g.add_row(m, bp);
            x = g.add(x, m);

            if let Some(patches) = by_layer.get(&l) {
                let rows: Vec<(usize, Var)> = patches
                    .iter()
                    .map(|&(pos, vec)| (pos, g.constant(Matrix::row_vector(vec.to_vec()))))
                    .collect();
                x = g.replace_rows(x, &rows);
            }
            layer_out.push(x);
        }

        let (gf, bf) = (w(self.lnf_g, g), w(self.lnf_b, g));
        let h = g.layer_norm(x, gf, bf);
        let logits = g.matmul_t(h, tok);
        Built {
            logits,
            layers: layer_out,
        }
    }

    fn run(&self, seq: &TokenSeq, taps: &LayerSet, interventions: &[Intervention]) -> ResidualTrace {
        let mut g = Graph::new();
        let slots = seq
            .slots
            .iter()
            .map(|(p, v)| (*p, SlotVar::Fixed(v.clone())))
            .collect();
        let built = self.build(&mut g, &seq.ids, slots, interventions, None);
        let hidden = taps
            .iter()
            .filter(|&l| l < self.config.layers)
            .map(|l| (l, g.value(built.layers[l]).clone()))
            .collect();
        ResidualTrace {
            hidden,
            logits: g.value(built.logits).clone(),
        }
    }

    /// Logits for every position and `h[l]` for every tapped layer.
    pub fn forward(&self, seq: &TokenSeq, taps: &LayerSet) -> Result<ResidualTrace> {
        self.check_seq(seq)?;
        Ok(self.run(seq, taps, &[]))
    }

    /// Forward pass with residual-stream overwrites. Each intervention
    /// replaces `h[l]` at its position before layer `l + 1` reads it.
    pub fn forward_patched(
        &self,
        seq: &TokenSeq,
        taps: &LayerSet,
        interventions: &[Intervention],
    ) -> Result<ResidualTrace> {
        self.check_seq(seq)?;
        self.check_interventions(seq.len(), interventions)?;
        Ok(self.run(seq, taps, interventions))
    }

    /// Greedy decode: appends up to `max_new` tokens, stopping after `stop`.
    pub fn generate(&self, prompt: &TokenSeq, max_new: usize, stop: u32) -> Result<Vec<u32>> {
        let mut seq = prompt.clone();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if seq.len() >= self.config.context {
                break;
            }
            let trace = self.forward(&seq, &LayerSet::none())?;
            let next = trace.last_argmax();
            out.push(next);
            if next == stop {
                break;
            }
            seq.ids.push(next);
        }
        Ok(out)
    }

    /// Sum of log-probabilities of `continuation` following `prompt`.
    pub fn sequence_logprob(&self, prompt: &TokenSeq, continuation: &[u32]) -> Result<f64> {
        let mut seq = prompt.clone();
        seq.ids.extend_from_slice(continuation);
        let trace = self.forward(&seq, &LayerSet::none())?;
        let mut total = 0.0f64;
        for (i, &tok) in continuation.iter().enumerate() {
            let row = trace.logits.row(prompt.len() + i - 1);
            total += log_softmax_at(row, tok as usize);
        }
        Ok(total)
    }
}

pub(crate) fn log_softmax_at(row: &[f32], idx: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let z: f64 = row.iter().map(|&l| f64::from(l - max).exp()).sum();
    f64::from(row[idx] - max) - z.ln()
}
