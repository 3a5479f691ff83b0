// SPDX-License-Identifier: MIT OR Apache-2.0

// Independent reference implementations shared by the integration tests
// and the acceptance suite. Everything here is written straight from the
// definitions in f64 and does not call into the engine's numerics.

#![allow(dead_code)]

use std::collections::BTreeMap;

use introspect::labels::Grammar;
use introspect::{ModelConfig, Transformer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named parameters as f64 row-major tensors.
#[derive(Clone)]
pub struct Params {
    pub cfg: ModelConfig,
    pub t: BTreeMap<String, (usize, usize, Vec<f64>)>,
}

impl Params {
    pub fn of(model: &Transformer) -> Self {
        let p = model.params();
        let t = p
            .names
            .iter()
            .zip(&p.tensors)
            .map(|(n, m)| (n.clone(), (m.rows(), m.cols(), m.data().iter().map(|&x| f64::from(x)).collect())))
            .collect();
        Self {
            cfg: model.config().clone(),
            t,
        }
    }

    fn m(&self, name: &str) -> &(usize, usize, Vec<f64>) {
        &self.t[name]
    }
}

type Rows = Vec<Vec<f64>>;

fn matmul(x: &Rows, w: &(usize, usize, Vec<f64>)) -> Rows {
    let (k, n, d) = (w.0, w.1, &w.2);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), k);
            (0..n).map(|j| (0..k).map(|i| row[i] * d[i * n + j]).sum()).collect()
        })
        .collect()
}

fn add_bias(x: &mut Rows, b: &(usize, usize, Vec<f64>)) {
    for row in x.iter_mut() {
        for (v, bb) in row.iter_mut().zip(&b.2) {
            *v += bb;
        }
    }
}

fn layer_norm(x: &Rows, g: &(usize, usize, Vec<f64>), b: &(usize, usize, Vec<f64>)) -> Rows {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let rs = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * rs * g.2[i] + b.2[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn attention(q: &Rows, k: &Rows, v: &Rows, heads: usize) -> Rows {
    let n = q.len();
    let d = q[0].len();
    let hd = d / heads;
    let mut out = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let r = h * hd..(h + 1) * hd;
        for i in 0..n {
            let scores: Vec<f64> = (0..=i)
                .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                for c in r.clone() {
                    out[i][c] += ej / z * v[j][c];
                }
            }
        }
    }
    out
}

/// Residual after every layer plus logits; `patches` overwrite the output
/// of layer `l` at position `t`.
pub fn forward(p: &Params, ids: &[u32], patches: &[(usize, usize, Vec<f64>)]) -> (Vec<Rows>, Rows) {
    let d = p.cfg.hidden;
    let tok = p.m("tok_emb");
    let pos = p.m("pos_emb");
    let mut x: Rows = ids
        .iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|c| tok.2[id as usize * d + c] + pos.2[t * d + c]).collect())
        .collect();
    let mut hidden = Vec::new();
    for l in 0..p.cfg.layers {
        let n = |s: &str| format!("layers.{l}.{s}");
        let h = layer_norm(&x, p.m(&n("ln1.g")), p.m(&n("ln1.b")));
        let q = matmul(&h, p.m(&n("attn.wq")));
        let k = matmul(&h, p.m(&n("attn.wk")));
        let v = matmul(&h, p.m(&n("attn.wv")));
        let mut a = matmul(&attention(&q, &k, &v, p.cfg.heads), p.m(&n("attn.wo")));
        add_bias(&mut a, p.m(&n("attn.bo")));
        for (xr, ar) in x.iter_mut().zip(&a) {
            for (xv, av) in xr.iter_mut().zip(ar) {
                *xv += av;
            }
        }
        let h = layer_norm(&x, p.m(&n("ln2.g")), p.m(&n("ln2.b")));
        let mut m = matmul(&h, p.m(&n("mlp.w_fc")));
        add_bias(&mut m, p.m(&n("mlp.b_fc")));
        m.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = gelu(*v)));
        let mut m = matmul(&m, p.m(&n("mlp.w_proj")));
        add_bias(&mut m, p.m(&n("mlp.b_proj")));
        for (xr, mr) in x.iter_mut().zip(&m) {
            for (xv, mv) in xr.iter_mut().zip(mr) {
                *xv += mv;
            }
        }
        for (pl, pt, v) in patches {
            if *pl == l {
                x[*pt] = v.clone();
            }
        }
        hidden.push(x.clone());
    }
    let h = layer_norm(&x, p.m("ln_f.g"), p.m("ln_f.b"));
    let logits = h
        .iter()
        .map(|row| {
            (0..tok.0)
                .map(|v| (0..d).map(|c| row[c] * tok.2[v * d + c]).sum())
                .collect()
        })
        .collect();
    (hidden, logits)
}

/// Mean next-token cross-entropy.
pub fn lm_loss(p: &Params, ids: &[u32]) -> f64 {
    let (_, logits) = forward(p, ids, &[]);
    let mut total = 0.0;
    for t in 0..ids.len() - 1 {
        let row = &logits[t];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|l| (l - max).exp()).sum();
        total += max + z.ln() - row[ids[t + 1] as usize];
    }
    total / (ids.len() - 1) as f64
}

/// d=8, L=2 model with weights spread enough to give non-trivial
/// gradients in every group.
pub fn shallow_model(seed: u64) -> Transformer {
    let cfg = ModelConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        vocab: 13,
        context: 12,
        mlp_ratio: 2,
        seed,
        rescale_slots: false,
    };
    let mut m = Transformer::new_shallow(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (name, t) in m.params_mut().names.clone().iter().zip(m.params_mut().tensors.iter_mut()) {
        let base = if name.ends_with(".g") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = base + rng.gen_range(-0.5..0.5);
        }
    }
    m
}

/// Central differences of [`lm_loss`] for every entry of every tensor.
pub fn numeric_gradients(model: &Transformer, ids: &[u32], h: f64) -> BTreeMap<String, Vec<f64>> {
    let base = Params::of(model);
    let mut out = BTreeMap::new();
    for name in base.t.keys() {
        let len = base.t[name].2.len();
        let mut g = Vec::with_capacity(len);
        for i in 0..len {
            let mut p = base.clone();
            p.t.get_mut(name).unwrap().2[i] += h;
            let up = lm_loss(&p, ids);
            p.t.get_mut(name).unwrap().2[i] -= 2.0 * h;
            let down = lm_loss(&p, ids);
            g.push((up - down) / (2.0 * h));
        }
        out.insert(name.clone(), g);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Pearson correlation straight from the definition; constant series give 0.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    let sa = a.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-30);
    let sb = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-30);
    if va <= 1e-12 * sa * sa * n || vb <= 1e-12 * sb * sb * n {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Every label scored by mean per-input correlation with its membership
/// indicator; best score wins, ties to the smaller rendering. Returns the
/// winner, its score and the runner-up score.
pub fn brute_force_label(grammar: &Grammar, corpus: &[Vec<u32>], acts: &[Vec<f32>]) -> (usize, f64, f64) {
    let mut scored: Vec<(f64, String, usize)> = grammar
        .labels()
        .iter()
        .map(|l| {
            let s: f64 = corpus
                .iter()
                .zip(acts)
                .map(|(x, a)| {
                    let ind: Vec<f64> = x.iter().map(|t| f64::from(u8::from(l.members.contains(t)))).collect();
                    let a: Vec<f64> = a.iter().map(|&v| f64::from(v)).collect();
                    pearson(&a, &ind)
                })
                .sum::<f64>()
                / corpus.len() as f64;
            (s, l.text.clone(), l.id)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    (scored[0].2, scored[0].0, scored.get(1).map_or(f64::NEG_INFINITY, |s| s.0))
}
