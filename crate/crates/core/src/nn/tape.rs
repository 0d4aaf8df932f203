// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in execution order, so every node's inputs have
//! smaller indices than the node itself and a single reverse sweep is a
//! valid reverse topological traversal.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, attention_offsets, Segment};
use super::Tensor;
use crate::error::{ProbeError, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op {
    Leaf { param: Option<usize> },
    Add(usize, usize),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Embed { table: usize, ids: Vec<usize> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Tensor, rstd: Vec<f64> },
    Gelu(usize),
    Softmax(usize),
    Attention { q: usize, k: usize, v: usize, n_heads: usize, segments: Vec<Segment>, probs: Vec<f64> },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Tensor, count: usize },
    Sum(usize),
    Scale(usize, f64),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive operations and replays their gradient rules backwards.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(ProbeError::DetachedLoss);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    /// A constant input; receives no gradient in the result map.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// A trainable input identified by `key` in the gradient map.
    pub fn param(&mut self, key: usize, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: Some(key) })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = kernels::add(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(v, Op::Add(ia, ib)))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let v = kernels::add_row(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(v, Op::AddRow(ia, ib)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = kernels::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(v, Op::MatMul(ia, ib)))
    }

    /// `x · w + b` for a `[rows, in]` input, `[in, out]` weight and `[out]` bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let v = kernels::embed(&self.nodes[it].value, ids)?;
        Ok(self.push(v, Op::Embed { table: it, ids: ids.to_vec() }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let out = kernels::layer_norm(&self.nodes[ix].value, &self.nodes[ig].value, &self.nodes[ib].value)?;
        Ok(self.push(
            out.y,
            Op::LayerNorm { x: ix, gamma: ig, beta: ib, xhat: out.xhat, rstd: out.rstd },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = kernels::gelu(&self.nodes[ix].value);
        Ok(self.push(v, Op::Gelu(ix)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let v = kernels::softmax_rows(&self.nodes[ix].value);
        Ok(self.push(v, Op::Softmax(ix)))
    }

    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, segments: &[Segment]) -> Result<Var> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let (out, probs) = kernels::causal_attention(
            &self.nodes[iq].value,
            &self.nodes[ik].value,
            &self.nodes[iv].value,
            n_heads,
            segments,
        )?;
        Ok(self.push(
            out,
            Op::Attention { q: iq, k: ik, v: iv, n_heads, segments: segments.to_vec(), probs },
        ))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let il = self.idx(logits)?;
        let (loss, probs, count) = kernels::cross_entropy(&self.nodes[il].value, targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: il, targets: targets.to_vec(), probs, count },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let mut v = self.nodes[ix].value.clone();
        v.data_mut().iter_mut().for_each(|e| *e *= c);
        Ok(self.push(v, Op::Scale(ix, c)))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    ///
    /// Parameters the loss does not depend on get zero tensors.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<usize, Tensor>> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(ProbeError::ShapeMismatch {
                op: "backward",
                lhs: self.nodes[root].value.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::filled(self.nodes[root].value.shape(), 1.0));
        let mut out = BTreeMap::new();

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(key) = param {
                        out.insert(*key, g);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::AddRow(a, b) => {
                    let cols = g.cols();
                    let mut gb = Tensor::zeros(self.nodes[*b].value.shape());
                    for r in 0..g.rows() {
                        for (acc, v) in gb.data_mut().iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut ga = Tensor::zeros(av.shape());
                    kernels::gemm(m, n, k, g.data(), false, bv.data(), true, ga.data_mut(), false);
                    let mut gb = Tensor::zeros(bv.shape());
                    kernels::gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), false);
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Embed { table, ids } => {
                    let mut gt = Tensor::zeros(self.nodes[*table].value.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (acc, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *table, &gt);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let gv = self.nodes[*gamma].value.data();
                    let d = g.cols();
                    let mut gx = Tensor::zeros(g.shape());
                    let mut gg = Tensor::zeros(&[d]);
                    let mut gbeta = Tensor::zeros(&[d]);
                    let mut dxhat = vec![0.0; d];
                    #[allow(clippy::needless_range_loop)]
                    for r in 0..g.rows() {
                        let (gr, xr) = (g.row(r), xhat.row(r));
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            gg.data_mut()[j] += gr[j] * xr[j];
                            gbeta.data_mut()[j] += gr[j];
                            dxhat[j] = gr[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xr[j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        let s = rstd[r];
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = s * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                    accumulate(&mut grads, *gamma, &gg);
                    accumulate(&mut grads, *beta, &gbeta);
                }
                Op::Gelu(x) => {
                    let mut gx = g;
                    for (o, &xv) in gx.data_mut().iter_mut().zip(self.nodes[*x].value.data()) {
                        *o *= kernels::gelu_grad_scalar(xv);
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut gx = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Attention { q, k, v, n_heads, segments, probs } => {
                    let (gq, gk, gv) = attention_backward(
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                        *n_heads,
                        segments,
                        probs,
                        &g,
                    );
                    accumulate(&mut grads, *q, &gq);
                    accumulate(&mut grads, *k, &gk);
                    accumulate(&mut grads, *v, &gv);
                }
                Op::CrossEntropy { logits, targets, probs, count } => {
                    let mut gl = Tensor::zeros(probs.shape());
                    if *count > 0 {
                        let c = g.data()[0] / *count as f64;
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = *t {
                                let row = gl.row_mut(r);
                                row.copy_from_slice(probs.row(r));
                                row[t] -= 1.0;
                                row.iter_mut().for_each(|e| *e *= c);
                            }
                        }
                    }
                    accumulate(&mut grads, *logits, &gl);
                }
                Op::Sum(x) => {
                    let gx = Tensor::filled(self.nodes[*x].value.shape(), g.data()[0]);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Scale(x, c) => {
                    let mut gx = g;
                    gx.data_mut().iter_mut().for_each(|e| *e *= *c);
                    accumulate(&mut grads, *x, &gx);
                }
            }
        }

        for node in &self.nodes {
            if let Op::Leaf { param: Some(key) } = node.op {
                out.entry(key).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], index: usize, g: &Tensor) {
    match &mut grads[index] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    segments: &[Segment],
    probs: &[f64],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = q.cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offsets = attention_offsets(segments, n_heads);
    let mut gq = Tensor::zeros(q.shape());
    let mut gk = Tensor::zeros(k.shape());
    let mut gv = Tensor::zeros(v.shape());
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), g.data());
    let mut dp = Vec::new();
    for (si, seg) in segments.iter().enumerate() {
        let t = seg.len;
        for h in 0..n_heads {
            let block = &probs[offsets[si * n_heads + h]..][..t * t];
            let col = h * dh;
            for i in 0..t {
                let gi = &gd[(seg.start + i) * d + col..][..dh];
                let prow = &block[i * t..i * t + i + 1];
                // dP_ij = dO_i · V_j and dV_j += P_ij dO_i
                dp.clear();
                for (j, &p) in prow.iter().enumerate() {
                    let vj = &vd[(seg.start + j) * d + col..][..dh];
                    dp.push(gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                    let gvj = &mut gv.data_mut()[(seg.start + j) * d + col..][..dh];
                    for (o, x) in gvj.iter_mut().zip(gi) {
                        *o += p * x;
                    }
                }
                let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qi = &qd[(seg.start + i) * d + col..][..dh];
                for (j, &p) in prow.iter().enumerate() {
                    let ds = p * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kd[(seg.start + j) * d + col..][..dh];
                    let gqi = &mut gq.data_mut()[(seg.start + i) * d + col..][..dh];
                    for (o, x) in gqi.iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                    let gkj = &mut gk.data_mut()[(seg.start + j) * d + col..][..dh];
                    for (o, x) in gkj.iter_mut().zip(qi) {
                        *o += ds * x;
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}
