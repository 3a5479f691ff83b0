// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode autodiff over [`Matrix`] values.
//!
//! A [`Graph`] records every op as it is evaluated. Parameters enter the
//! tape by reference together with a caller-chosen gradient slot, so a
//! forward pass never copies weights. Calling [`Graph::backward`] on a
//! scalar node accumulates parameter gradients into the caller's buffers.
//!
//! The op set is exactly what a pre-norm decoder-only transformer needs,
//! with layer norm, causal attention and masked cross-entropy fused into
//! single nodes.

use crate::tensor::{dot, matmul_acc, matmul_t_acc, t_matmul_acc, Matrix};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Matrix),
    Borrowed(&'a Matrix),
}

enum Op {
    Leaf { grad_slot: Option<usize> },
    Gather { table: usize, ids: Vec<usize> },
    Add(usize, usize),
    AddRow(usize, usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Scale(usize, f32),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Matrix,
        rstd: Vec<f32>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<f32>,
    },
    ReplaceRows {
        base: usize,
        rows: Vec<(usize, usize)>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<u32>>,
        probs: Matrix,
        count: usize,
    },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
}

const LN_EPS: f32 = 1e-5;

/// Recording tape. Values borrowed from parameter stores live for `'a`.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }

    fn val(&self, i: usize) -> &Matrix {
        self.value(Var(i))
    }

    /// A trainable parameter; its gradient lands in `grads[grad_slot]`.
    pub fn param(&mut self, m: &'a Matrix, grad_slot: usize) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(m),
            op: Op::Leaf {
                grad_slot: Some(grad_slot),
            },
        });
        Var(self.nodes.len() - 1)
    }

    /// A frozen tensor borrowed from outside the tape.
    pub fn frozen(&mut self, m: &'a Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(m),
            op: Op::Leaf { grad_slot: None },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf { grad_slot: None })
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let out = self.value(table).select_rows(ids);
        self.push(
            out,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a.0, b.0))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut out = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        assert_eq!(b.cols(), out.cols());
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(a.0, bias.0))
    }

    /// `a @ w` with `w` stored as `[in, out]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let out = self.value(a).matmul(self.value(w));
        self.push(out, Op::MatMul(a.0, w.0))
    }

    /// `a @ w^T`.
    pub fn matmul_t(&mut self, a: Var, w: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(w));
        self.push(out, Op::MatMulT(a.0, w.0))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        self.push(out, Op::Scale(a.0, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = gelu(*x));
        self.push(out, Op::Gelu(a.0))
    }

    /// Row-wise layer norm with affine `gamma`, `beta` (`1 x d` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (n, d) = xm.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xm.row(r);
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = xhat.clone();
        for r in 0..n {
            for ((o, &gv), &bv) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
        )
    }

    /// Causal multi-head scaled dot-product attention over `[n, d]` inputs.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qm.shape();
        let hd = d / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut probs = vec![0.0f32; heads * n * n];
        let mut out = Matrix::zeros(n, d);
        for h in 0..heads {
            let off = h * hd;
            for i in 0..n {
                let qi = &qm.row(i)[off..off + hd];
                let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let mut max = f32::NEG_INFINITY;
                for j in 0..=i {
                    let s = dot(qi, &km.row(j)[off..off + hd]) * scale;
                    p[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for pj in p.iter_mut().take(i + 1) {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                for pj in p.iter_mut().take(i + 1) {
                    *pj /= z;
                }
                let orow = &mut out.row_mut(i)[off..off + hd];
                for (j, &pj) in p.iter().enumerate().take(i + 1) {
                    let vj = &vm.row(j)[off..off + hd];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                probs,
            },
        )
    }

    /// Copy of `base` with each listed row overwritten by a `1 x d` node.
    pub fn replace_rows(&mut self, base: Var, rows: &[(usize, Var)]) -> Var {
        let mut out = self.value(base).clone();
        for &(pos, src) in rows {
            let s = self.value(src);
            assert_eq!(s.shape(), (1, out.cols()), "replacement row shape");
            out.row_mut(pos).copy_from_slice(s.data());
        }
        self.push(
            out,
            Op::ReplaceRows {
                base: base.0,
                rows: rows.iter().map(|&(p, v)| (p, v.0)).collect(),
            },
        )
    }

    /// Mean next-token cross-entropy over rows with a target. Rows without
    /// a target contribute nothing; with no targets at all the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>]) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows(), targets.len(), "one target slot per row");
        let mut probs = Matrix::zeros(lm.rows(), lm.cols());
        let mut total = 0.0f64;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = t else { continue };
            let row = lm.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            let prow = probs.row_mut(r);
            for (p, &l) in prow.iter_mut().zip(row) {
                *p = (l - max).exp();
                z += *p;
            }
            for p in prow.iter_mut() {
                *p /= z;
            }
            total += f64::from(max + z.ln() - row[*t as usize]);
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Matrix::from_vec(1, 1, vec![loss as f32]),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients
    /// into `grads` (indexed by the slot given to [`Graph::param`]).
    pub fn backward(&self, loss: Var, grads: &mut [Matrix]) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut g: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(gout) = g[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { grad_slot } => {
                    if let Some(slot) = grad_slot {
                        grads[*slot].add_assign(&gout);
                    }
                }
                Op::Gather { table, ids } => {
                    let t = self.val(*table);
                    let mut gt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in gt.row_mut(id).iter_mut().zip(gout.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut g, *table, gt);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *a, gout.clone());
                    accumulate(&mut g, *b, gout);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Matrix::zeros(1, gout.cols());
                    for r in 0..gout.rows() {
                        for (o, &v) in gb.data_mut().iter_mut().zip(gout.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut g, *bias, gb);
                    accumulate(&mut g, *a, gout);
                }
                Op::MatMul(a, w) => {
                    let (am, wm) = (self.val(*a), self.val(*w));
                    let (n, k) = am.shape();
                    let m = wm.cols();
                    let mut ga = Matrix::zeros(n, k);
                    matmul_t_acc(gout.data(), wm.data(), ga.data_mut(), n, m, k);
                    let mut gw = Matrix::zeros(k, m);
                    t_matmul_acc(am.data(), gout.data(), gw.data_mut(), n, k, m);
                    accumulate(&mut g, *a, ga);
                    accumulate(&mut g, *w, gw);
                }
                Op::MatMulT(a, w) => {
                    // out[n,m] = a[n,k] @ w[m,k]^T
                    let (am, wm) = (self.val(*a), self.val(*w));
                    let (n, k) = am.shape();
                    let m = wm.rows();
                    let mut ga = Matrix::zeros(n, k);
                    matmul_acc(gout.data(), wm.data(), ga.data_mut(), n, m, k);
                    let mut gw = Matrix::zeros(m, k);
                    t_matmul_acc(gout.data(), am.data(), gw.data_mut(), n, m, k);
                    accumulate(&mut g, *a, ga);
                    accumulate(&mut g, *w, gw);
                }
                Op::Scale(a, s) => {
                    let mut ga = gout;
                    ga.scale(*s);
                    accumulate(&mut g, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = self.val(*a);
                    let mut ga = gout;
                    for (o, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        *o *= gelu_grad(xv);
                    }
                    accumulate(&mut g, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gm = self.val(*gamma).data();
                    let (n, d) = xhat.shape();
                    let mut gg = Matrix::zeros(1, d);
                    let mut gbeta = Matrix::zeros(1, d);
                    let mut gx = Matrix::zeros(n, d);
                    let mut dxhat = vec![0.0f32; d];
                    for r in 0..n {
                        let dy = gout.row(r);
                        let xh = xhat.row(r);
                        for c in 0..d {
                            gg.data_mut()[c] += dy[c] * xh[c];
                            gbeta.data_mut()[c] += dy[c];
                            dxhat[c] = dy[c] * gm[c];
                        }
                        let mean_d = dxhat.iter().sum::<f32>() / d as f32;
                        let mean_dx = dot(&dxhat, xh) / d as f32;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    accumulate(&mut g, *gamma, gg);
                    accumulate(&mut g, *beta, gbeta);
                    accumulate(&mut g, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qm, km, vm) = (self.val(*q), self.val(*k), self.val(*v));
                    let (n, d) = qm.shape();
                    let hd = d / heads;
                    let scale = 1.0 / (hd as f32).sqrt();
                    let mut gq = Matrix::zeros(n, d);
                    let mut gk = Matrix::zeros(n, d);
                    let mut gv = Matrix::zeros(n, d);
                    let mut dp = vec![0.0f32; n];
                    for h in 0..*heads {
                        let off = h * hd;
                        for i in 0..n {
                            let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                            let go = &gout.row(i)[off..off + hd];
                            let mut weighted = 0.0;
                            for j in 0..=i {
                                dp[j] = dot(go, &vm.row(j)[off..off + hd]);
                                weighted += p[j] * dp[j];
                                let gvj = &mut gv.row_mut(j)[off..off + hd];
                                for (o, &gov) in gvj.iter_mut().zip(go) {
                                    *o += p[j] * gov;
                                }
                            }
                            for j in 0..=i {
                                let ds = p[j] * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &km.row(j)[off..off + hd];
                                let gqi = &mut gq.row_mut(i)[off..off + hd];
                                for (o, &kv) in gqi.iter_mut().zip(kj) {
                                    *o += ds * kv;
                                }
                                let qi = &qm.row(i)[off..off + hd];
                                let gkj = &mut gk.row_mut(j)[off..off + hd];
                                for (o, &qv) in gkj.iter_mut().zip(qi) {
                                    *o += ds * qv;
                                }
                            }
                        }
                    }
                    accumulate(&mut g, *q, gq);
                    accumulate(&mut g, *k, gk);
                    accumulate(&mut g, *v, gv);
                }
                Op::ReplaceRows { base, rows } => {
                    let mut gb = gout;
                    for &(pos, src) in rows {
                        let gs = Matrix::row_vector(gb.row(pos).to_vec());
                        gb.row_mut(pos).fill(0.0);
                        accumulate(&mut g, src, gs);
                    }
                    accumulate(&mut g, *base, gb);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    if *count == 0 {
                        continue;
                    }
                    let s = gout.data()[0] / *count as f32;
                    let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let grow = gl.row_mut(r);
                        for (o, &p) in grow.iter_mut().zip(probs.row(r)) {
                            *o = p * s;
                        }
                        grow[*t as usize] -= s;
                    }
                    accumulate(&mut g, *logits, gl);
                }
            }
        }
    }
}

fn accumulate(g: &mut [Option<Matrix>], i: usize, m: Matrix) {
    match &mut g[i] {
        Some(existing) => existing.add_assign(&m),
        slot => *slot = Some(m),
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
