// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoders on residual-stream activations and the three
//! feature sources: SAE dictionary rows, raw activations (ACT) and
//! counterfactual differences (ΔACT).

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::codec::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};
use crate::model::{LayerSet, TokenSeq, Transformer};
use crate::tensor::{dot, normalized, Matrix};
use crate::train::Adam;

/// One recorded residual vector `h[layer, position]` of input `input`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTap {
    pub input: usize,
    pub layer: usize,
    pub position: usize,
    pub vector: Vec<f32>,
}

/// Taps for every requested layer at every position of every input.
pub fn collect_activations(
    model: &Transformer,
    corpus: &[Vec<u32>],
    layers: &[usize],
) -> Result<Vec<ActivationTap>> {
    let set = LayerSet::of(layers);
    let mut out = Vec::new();
    for (i, x) in corpus.iter().enumerate() {
        if x.is_empty() {
            continue;
        }
        let trace = model.forward(&TokenSeq::new(x.clone()), &set)?;
        for l in set.iter() {
            for t in 0..x.len() {
                out.push(ActivationTap {
                    input: i,
                    layer: l,
                    position: t,
                    vector: trace.at(l, t).to_vec(),
                });
            }
        }
    }
    Ok(out)
}

/// Stacks the taps of one layer into `[n, d]`.
pub fn taps_matrix(taps: &[ActivationTap], layer: usize) -> Matrix {
    let rows: Vec<&ActivationTap> = taps.iter().filter(|t| t.layer == layer).collect();
    let d = rows.first().map_or(0, |t| t.vector.len());
    let data = rows.iter().flat_map(|t| t.vector.iter().copied()).collect();
    Matrix::from_vec(rows.len(), d, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeConfig {
    pub expansion: usize,
    pub l1: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            expansion: 4,
            l1: 3e-3,
            steps: 3000,
            batch_size: 64,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Single-layer SAE. Decoder rows (`w_dec[j]`) are the dictionary
/// directions and are kept at unit norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sae {
    pub layer: usize,
    pub l1: f32,
    /// `[d, m]`
    pub w_enc: Matrix,
    pub b_enc: Vec<f32>,
    /// `[m, d]`
    pub w_dec: Matrix,
    pub b_dec: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeStats {
    pub mse: f64,
    pub mean_l0: f64,
    /// MSE of reconstructing every tap with zero.
    pub zero_mse: f64,
}

impl Sae {
    pub fn d(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn m(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn encode(&self, x: &[f32]) -> Vec<f32> {
        let mut f = self.b_enc.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                for (fj, w) in f.iter_mut().zip(self.w_enc.row(i)) {
                    *fj += xi * w;
                }
            }
        }
        f.iter_mut().for_each(|v| *v = v.max(0.0));
        f
    }

    pub fn decode(&self, f: &[f32]) -> Vec<f32> {
        let mut x = self.b_dec.clone();
        for (j, &fj) in f.iter().enumerate() {
            if fj != 0.0 {
                for (xi, w) in x.iter_mut().zip(self.w_dec.row(j)) {
                    *xi += fj * w;
                }
            }
        }
        x
    }

    fn normalize_decoder(&mut self) {
        for j in 0..self.m() {
            let row = self.w_dec.row_mut(j);
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    /// Largest deviation of a decoder row norm from 1.
    pub fn decoder_norm_error(&self) -> f32 {
        (0..self.m())
            .map(|j| {
                let r = self.w_dec.row(j);
                (r.iter().map(|v| v * v).sum::<f32>().sqrt() - 1.0).abs()
            })
            .fold(0.0, f32::max)
    }

    pub fn stats(&self, data: &Matrix) -> SaeStats {
        let (n, d) = data.shape();
        let (mut se, mut zero, mut l0) = (0.0f64, 0.0f64, 0.0f64);
        for r in 0..n {
            let x = data.row(r);
            let f = self.encode(x);
            l0 += f.iter().filter(|&&v| v > 0.0).count() as f64;
            let xh = self.decode(&f);
            se += x.iter().zip(&xh).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
            zero += x.iter().map(|&a| (a as f64).powi(2)).sum::<f64>();
        }
        let denom = (n * d).max(1) as f64;
        SaeStats {
            mse: se / denom,
            mean_l0: l0 / n.max(1) as f64,
            zero_mse: zero / denom,
        }
    }

    pub fn to_container(&self) -> Container {
        Container {
            meta: serde_json::json!({ "kind": "sae", "layer": self.layer, "l1": self.l1 }),
            tensors: vec![
                ("w_enc".into(), self.w_enc.clone()),
                ("b_enc".into(), Matrix::row_vector(self.b_enc.clone())),
                ("w_dec".into(), self.w_dec.clone()),
                ("b_dec".into(), Matrix::row_vector(self.b_dec.clone())),
            ],
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("sae") {
            return Err(Error::Format("container does not hold an SAE".into()));
        }
        let layer = c.meta["layer"]
            .as_u64()
            .ok_or_else(|| Error::Format("SAE layer missing".into()))? as usize;
        let l1 = c.meta["l1"].as_f64().unwrap_or(0.0) as f32;
        let mut t: BTreeMap<String, Matrix> = c.tensors.into_iter().collect();
        let mut take = |name: &str| {
            t.remove(name)
                .ok_or_else(|| Error::Format(format!("SAE tensor {name} missing")))
        };
        let sae = Self {
            layer,
            l1,
            w_enc: take("w_enc")?,
            b_enc: take("b_enc")?.into_vec(),
            w_dec: take("w_dec")?,
            b_dec: take("b_dec")?.into_vec(),
        };
        if sae.w_dec.shape() != (sae.m(), sae.d()) || sae.b_enc.len() != sae.m() || sae.b_dec.len() != sae.d() {
            return Err(Error::Format("inconsistent SAE tensor shapes".into()));
        }
        Ok(sae)
    }
}

/// Trains an SAE on `[n, d]` taps: MSE + `l1` * mean code L1, decoder
/// rows renormalized after every step.
pub fn train_sae(data: &Matrix, layer: usize, cfg: &SaeConfig) -> Result<(Sae, SaeStats)> {
    let (n, d) = data.shape();
    let m = cfg.expansion * d;
    if cfg.expansion < 2 || m <= d {
        return Err(Error::Config("SAE needs m > d (expansion >= 2)".into()));
    }
    if cfg.l1 < 0.0 || !cfg.l1.is_finite() {
        return Err(Error::Config("l1 weight must be non-negative".into()));
    }
    if n == 0 {
        return Err(Error::EmptyObjective("no taps to train the SAE on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (layer as u64).wrapping_mul(0x9e37));
    let mut w_dec = Matrix::randn(m, d, 1.0, &mut rng);
    let mut sae = Sae {
        layer,
        l1: cfg.l1,
        w_enc: Matrix::zeros(d, m),
        b_enc: vec![0.0; m],
        w_dec: w_dec.clone(),
        b_dec: vec![0.0; d],
    };
    sae.normalize_decoder();
    w_dec = sae.w_dec.clone();
    sae.w_enc = w_dec.transpose();
    // start the decoder bias at the data mean
    for r in 0..n {
        for (b, x) in sae.b_dec.iter_mut().zip(data.row(r)) {
            *b += x / n as f32;
        }
    }

    let shapes = [
        Matrix::zeros(d, m),
        Matrix::zeros(1, m),
        Matrix::zeros(m, d),
        Matrix::zeros(1, d),
    ];
    let mut adam = Adam::new(&shapes);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let bs = cfg.batch_size.max(1).min(n);

    for step in 0..cfg.steps {
        if cursor + bs > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = data.select_rows(&order[cursor..cursor + bs]);
        cursor += bs;

        let mut pre = batch.matmul(&sae.w_enc);
        for r in 0..bs {
            for (p, b) in pre.row_mut(r).iter_mut().zip(&sae.b_enc) {
                *p += b;
            }
        }
        let mut f = pre.clone();
        f.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let mut xh = f.matmul(&sae.w_dec);
        for r in 0..bs {
            for (x, b) in xh.row_mut(r).iter_mut().zip(&sae.b_dec) {
                *x += b;
            }
        }
        let scale = 2.0 / (bs * d) as f32;
        let mut dr = xh;
        for (o, x) in dr.data_mut().iter_mut().zip(batch.data()) {
            *o = (*o - x) * scale;
        }
        let mut grads = shapes.clone();
        grads[2] = f.t_matmul(&dr);
        for r in 0..bs {
            for (g, v) in grads[3].data_mut().iter_mut().zip(dr.row(r)) {
                *g += v;
            }
        }
        let mut df = dr.matmul_t(&sae.w_dec);
        let l1g = cfg.l1 / bs as f32;
        for (g, p) in df.data_mut().iter_mut().zip(pre.data()) {
            *g = if *p > 0.0 { *g + l1g } else { 0.0 };
        }
        grads[0] = batch.t_matmul(&df);
        for r in 0..bs {
            for (g, v) in grads[1].data_mut().iter_mut().zip(df.row(r)) {
                *g += v;
            }
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("non-finite SAE gradient at layer {layer}"),
            });
        }
        let mut b_enc = Matrix::row_vector(std::mem::take(&mut sae.b_enc));
        let mut b_dec = Matrix::row_vector(std::mem::take(&mut sae.b_dec));
        adam.step(
            &mut [&mut sae.w_enc, &mut b_enc, &mut sae.w_dec, &mut b_dec],
            &mut grads,
            cfg.lr,
            0.0,
        );
        sae.b_enc = b_enc.into_vec();
        sae.b_dec = b_dec.into_vec();
        sae.normalize_decoder();
    }
    let stats = sae.stats(data);
    if !stats.mse.is_finite() {
        return Err(Error::Diverged {
            step: cfg.steps,
            detail: "SAE reconstruction is not finite".into(),
        });
    }
    Ok((sae, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "SAE")]
    Sae,
    #[serde(rename = "ACT")]
    Act,
    #[serde(rename = "DACT")]
    DeltaAct,
}

/// Unit-norm residual direction with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDirection {
    pub id: String,
    pub layer: usize,
    pub source: Source,
    #[serde(with = "crate::codec::b64")]
    pub vector: Vec<f32>,
}

pub fn save_features(path: &Path, features: &[FeatureDirection]) -> Result<()> {
    write_jsonl(path, features)
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureDirection>> {
    read_jsonl(path)
}

/// One direction per dictionary row, ordered by (layer, row).
pub fn extract_features(saes: &[Sae]) -> Vec<FeatureDirection> {
    let mut sorted: Vec<&Sae> = saes.iter().collect();
    sorted.sort_by_key(|s| s.layer);
    sorted
        .into_iter()
        .flat_map(|s| {
            (0..s.m()).filter_map(move |j| {
                normalized(s.w_dec.row(j), 1e-12).map(|v| FeatureDirection {
                    id: format!("sae-l{}-{j:04}", s.layer),
                    layer: s.layer,
                    source: Source::Sae,
                    vector: v,
                })
            })
        })
        .collect()
}

/// Normalized raw activations. Taps with (near) zero norm are skipped.
pub fn act_features(taps: &[ActivationTap]) -> Vec<FeatureDirection> {
    taps.iter()
        .filter_map(|t| {
            normalized(&t.vector, 1e-8).map(|v| FeatureDirection {
                id: format!("act-{}-l{}-t{}", t.input, t.layer, t.position),
                layer: t.layer,
                source: Source::Act,
                vector: v,
            })
        })
        .collect()
}

/// A counterfactual pair aligned at `position`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub x: Vec<u32>,
    pub x_prime: Vec<u32>,
    pub position: usize,
}

/// `normalize(h[l,t](x) - h[l,t](x'))` per pair; returns the directions
/// and the number of pairs skipped for a vanishing difference.
pub fn delta_features(
    model: &Transformer,
    pairs: &[AlignedPair],
    layer: usize,
) -> Result<(Vec<FeatureDirection>, usize)> {
    let taps = LayerSet::of(&[layer]);
    let mut out = Vec::new();
    let mut skipped = 0;
    for (i, p) in pairs.iter().enumerate() {
        if p.position >= p.x.len() || p.position >= p.x_prime.len() {
            return Err(Error::Shape(format!(
                "pair {i} is not aligned at position {} (lengths {} and {})",
                p.position,
                p.x.len(),
                p.x_prime.len()
            )));
        }
        let a = model.forward(&TokenSeq::new(p.x.clone()), &taps)?;
        let b = model.forward(&TokenSeq::new(p.x_prime.clone()), &taps)?;
        let diff: Vec<f32> = a
            .at(layer, p.position)
            .iter()
            .zip(b.at(layer, p.position))
            .map(|(u, v)| u - v)
            .collect();
        match normalized(&diff, 1e-8) {
            Some(v) => out.push(FeatureDirection {
                id: format!("dact-{i}-l{layer}"),
                layer,
                source: Source::DeltaAct,
                vector: v,
            }),
            None => skipped += 1,
        }
    }
    Ok((out, skipped))
}

/// `a_v(x, layer, t) = <h[layer, t](x), v>` for every position.
pub fn feature_activation(model: &Transformer, v: &[f32], layer: usize, x: &[u32]) -> Result<Vec<f32>> {
    if v.len() != model.hidden() {
        return Err(Error::Shape(format!(
            "feature has {} dims, model has {}",
            v.len(),
            model.hidden()
        )));
    }
    let trace = model.forward(&TokenSeq::new(x.to_vec()), &LayerSet::of(&[layer]))?;
    Ok((0..x.len()).map(|t| dot(trace.at(layer, t), v)).collect())
}

/// Activation series for many inputs from precomputed per-input taps
/// (`taps[i]` is `[len_i, d]`).
pub fn activation_series(taps: &[Matrix], v: &[f32]) -> Vec<Vec<f32>> {
    taps.iter()
        .map(|m| (0..m.rows()).map(|t| dot(m.row(t), v)).collect())
        .collect()
}

/// Per-input hidden states of one layer.
pub fn layer_taps(model: &Transformer, corpus: &[Vec<u32>], layer: usize) -> Result<Vec<Matrix>> {
    let set = LayerSet::of(&[layer]);
    corpus
        .iter()
        .map(|x| {
            let mut tr = model.forward(&TokenSeq::new(x.clone()), &set)?;
            Ok(tr.hidden.remove(&layer).expect("tapped layer"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn low_rank(n: usize, d: usize, rank: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = Matrix::randn(rank, d, 1.0, &mut rng);
        let mut data = Matrix::zeros(n, d);
        for r in 0..n {
            let k = rng.gen_range(0..rank);
            let a: f32 = rng.gen_range(0.5..1.5);
            for (o, b) in data.row_mut(r).iter_mut().zip(basis.row(k)) {
                *o = a * b;
            }
        }
        data
    }

    #[test]
    fn unpenalized_sae_reconstructs_low_rank_data() {
        let data = low_rank(400, 8, 3, 1);
        let cfg = SaeConfig {
            l1: 0.0,
            steps: 3000,
            lr: 1e-2,
            ..SaeConfig::default()
        };
        let (sae, stats) = train_sae(&data, 0, &cfg).unwrap();
        assert!(stats.mse < 1e-3, "{stats:?}");
        assert!(stats.mse < stats.zero_mse);
        assert!(sae.decoder_norm_error() <= 1e-4);
    }

    #[test]
    fn stronger_sparsity_lowers_l0() {
        let data = low_rank(400, 8, 6, 2);
        let run = |l1| {
            train_sae(
                &data,
                0,
                &SaeConfig {
                    l1,
                    steps: 1500,
                    ..SaeConfig::default()
                },
            )
            .unwrap()
            .1
        };
        let base = run(0.01);
        let strong = run(0.1);
        assert!(strong.mean_l0 < base.mean_l0, "{base:?} vs {strong:?}");
    }

    #[test]
    fn zero_input_gives_zero_code() {
        let data = low_rank(50, 8, 2, 3);
        let (mut sae, _) = train_sae(&data, 1, &SaeConfig { steps: 10, ..SaeConfig::default() }).unwrap();
        sae.b_enc.iter_mut().for_each(|b| *b = 0.0);
        assert!(sae.encode(&[0.0; 8]).iter().all(|&v| v == 0.0));
        let back = Sae::from_container(Container::from_bytes(&sae.to_container().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, sae);
    }

    #[test]
    fn rejects_bad_configs() {
        let data = low_rank(10, 4, 2, 0);
        assert!(train_sae(&data, 0, &SaeConfig { expansion: 1, ..SaeConfig::default() }).is_err());
        assert!(train_sae(&data, 0, &SaeConfig { l1: -1.0, ..SaeConfig::default() }).is_err());
    }

    fn model() -> Transformer {
        Transformer::new(ModelConfig {
            layers: 4,
            hidden: 8,
            heads: 2,
            vocab: 12,
            context: 8,
            mlp_ratio: 2,
            seed: 4,
            rescale_slots: false,
        })
        .unwrap()
    }

    #[test]
    fn taps_pass_through_and_count() {
        let m = model();
        let corpus = vec![vec![1, 2, 3], vec![4, 5]];
        assert!(collect_activations(&m, &[], &[0]).unwrap().is_empty());
        let taps = collect_activations(&m, &corpus, &[0, 2]).unwrap();
        assert_eq!(taps.len(), (3 + 2) * 2);
        let tr = m.forward(&TokenSeq::new(corpus[1].clone()), &LayerSet::of(&[2])).unwrap();
        let t = taps.iter().find(|t| t.input == 1 && t.layer == 2 && t.position == 1).unwrap();
        assert_eq!(t.vector, tr.at(2, 1));
    }

    #[test]
    fn feature_activation_identities() {
        let m = model();
        let x = vec![3, 1, 4];
        let tr = m.forward(&TokenSeq::new(x.clone()), &LayerSet::of(&[1])).unwrap();
        let h = tr.at(1, 2);
        let v = normalized(h, 1e-12).unwrap();
        let a = feature_activation(&m, &v, 1, &x).unwrap();
        let n = h.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((a[2] - n).abs() < 1e-5 * n.max(1.0));
        assert!((dot(&[1.0, 2.0, 0.0], &[0.6, 0.8, 0.0]) - 2.2).abs() < 1e-6);
    }

    #[test]
    fn delta_features_are_antisymmetric_and_skip_self_pairs() {
        let m = model();
        let p = AlignedPair {
            x: vec![1, 2, 3],
            x_prime: vec![1, 5, 3],
            position: 2,
        };
        let q = AlignedPair {
            x: p.x_prime.clone(),
            x_prime: p.x.clone(),
            position: 2,
        };
        let same = AlignedPair {
            x: p.x.clone(),
            x_prime: p.x.clone(),
            position: 1,
        };
        let (f, skipped) = delta_features(&m, &[p.clone(), q, same], 3).unwrap();
        assert_eq!(skipped, 1);
        for (a, b) in f[0].vector.iter().zip(&f[1].vector) {
            assert!((a + b).abs() < 1e-6);
        }
        let bad = AlignedPair { position: 7, ..p };
        assert!(delta_features(&m, &[bad], 0).is_err());
    }

    #[test]
    fn extracted_features_are_unit_norm_and_persist() {
        let data = low_rank(60, 8, 2, 5);
        let saes: Vec<Sae> = (0..2)
            .map(|l| train_sae(&data, l, &SaeConfig { steps: 20, ..SaeConfig::default() }).unwrap().0)
            .collect();
        let f = extract_features(&saes);
        assert_eq!(f.len(), 2 * 32);
        for v in &f {
            assert!((crate::tensor::norm(&v.vector) - 1.0).abs() <= 1e-5);
        }
        let dir = std::env::temp_dir().join(format!("sae-feat-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.jsonl");
        save_features(&path, &f).unwrap();
        assert_eq!(load_features(&path).unwrap(), f);
    }
}
