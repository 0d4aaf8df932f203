// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward kernels shared by the taped (training) and untaped (probing) paths.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::Tensor;
use crate::error::{ProbeError, Result};

/// Epsilon inside the layer-norm variance.
pub const LN_EPS: f64 = 1e-5;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a_t` means `a` is stored as `k×m`; `b_t` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn expect_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(ProbeError::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_matrix("matmul", a)?;
    let (k2, n) = expect_matrix("matmul", b)?;
    if k != k2 {
        return Err(ProbeError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut(), false);
    Ok(out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.same_shape(b) {
        return Err(ProbeError::ShapeMismatch {
            op: "add",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Adds a length-`cols` bias vector to every row.
pub fn add_row(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if bias.len() != a.cols() || bias.shape().len() != 1 {
        return Err(ProbeError::ShapeMismatch {
            op: "add_row",
            lhs: a.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = a.clone();
    let b = bias.data();
    for r in 0..out.rows() {
        for (x, y) in out.row_mut(r).iter_mut().zip(b) {
            *x += y;
        }
    }
    Ok(out)
}

/// Gathers rows `ids` of `table`.
pub fn embed(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (rows, d) = expect_matrix("embed", table)?;
    let mut out = Tensor::zeros(&[ids.len(), d]);
    for (i, &id) in ids.iter().enumerate() {
        if id >= rows {
            return Err(ProbeError::ShapeMismatch {
                op: "embed",
                lhs: table.shape().to_vec(),
                rhs: vec![id],
            });
        }
        out.row_mut(i).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Output of a row-wise layer norm, with what the backward pass needs.
pub struct LayerNormOut {
    pub y: Tensor,
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<LayerNormOut> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(ProbeError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(s);
        let xh = xhat.row_mut(r);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
        let params = gamma.data().iter().zip(beta.data());
        for ((o, xv), (g, b)) in y.row_mut(r).iter_mut().zip(xhat.row(r)).zip(params) {
            *o = xv * g + b;
        }
    }
    Ok(LayerNormOut { y, xhat, rstd })
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Derivative of exact GELU, `Φ(x) + x · φ(x)`.
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
    out
}

/// Numerically stable softmax of one slice into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// Softmax over the trailing dimension.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        let (src, dst) = (x.row(r), r);
        let mut tmp = vec![0.0; src.len()];
        softmax_into(src, &mut tmp);
        out.row_mut(dst).copy_from_slice(&tmp);
    }
    out
}

/// A contiguous run of rows forming one causal sequence inside a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Offset of each (segment, head) probability block inside the flat buffer
/// returned by [`causal_attention`].
pub fn attention_offsets(segments: &[Segment], n_heads: usize) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(segments.len() * n_heads);
    let mut acc = 0;
    for s in segments {
        for _ in 0..n_heads {
            offsets.push(acc);
            acc += s.len * s.len;
        }
    }
    offsets.push(acc);
    offsets
}

/// Multi-head causal self-attention over packed sequences.
///
/// `q`, `k`, `v` are `[rows, d_model]`; head `h` owns columns
/// `h*dh..(h+1)*dh`. Returns the concatenated head outputs (before the output
/// projection) and the attention probabilities, `len×len` per
/// (segment, head), zero above the diagonal.
pub fn causal_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    segments: &[Segment],
) -> Result<(Tensor, Vec<f64>)> {
    if !q.same_shape(k) || !q.same_shape(v) || q.shape().len() != 2 {
        return Err(ProbeError::ShapeMismatch {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let d = q.cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(ProbeError::ShapeMismatch {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: vec![n_heads],
        });
    }
    let covered: usize = segments.iter().map(|s| s.len).sum();
    if segments.iter().any(|s| s.start + s.len > q.rows()) || covered > q.rows() {
        return Err(ProbeError::ShapeMismatch {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: vec![covered],
        });
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offsets = attention_offsets(segments, n_heads);
    let mut probs = vec![0.0; *offsets.last().unwrap_or(&0)];
    let mut out = Tensor::zeros(q.shape());
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut scores = Vec::new();
    for (si, seg) in segments.iter().enumerate() {
        let t = seg.len;
        for h in 0..n_heads {
            let block = &mut probs[offsets[si * n_heads + h]..][..t * t];
            let col = h * dh;
            for i in 0..t {
                let qi = &qd[(seg.start + i) * d + col..][..dh];
                scores.clear();
                for j in 0..=i {
                    let kj = &kd[(seg.start + j) * d + col..][..dh];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    scores.push(dot * scale);
                }
                softmax_into(&scores, &mut block[i * t..i * t + i + 1]);
                let orow = &mut out.data_mut()[(seg.start + i) * d + col..][..dh];
                for j in 0..=i {
                    let p = block[i * t + j];
                    let vj = &vd[(seg.start + j) * d + col..][..dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

/// Mean next-token cross-entropy over rows whose target is `Some`.
///
/// Returns `(loss, softmax probabilities, number of scored rows)`. With no
/// scored rows the loss is 0.
pub fn cross_entropy(logits: &Tensor, targets: &[Option<usize>]) -> Result<(f64, Tensor, usize)> {
    if logits.shape().len() != 2 || logits.rows() != targets.len() {
        return Err(ProbeError::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let vocab = logits.cols();
    let probs = softmax_rows(logits);
    let mut total = 0.0;
    let mut count = 0;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            if t >= vocab {
                return Err(ProbeError::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: logits.shape().to_vec(),
                    rhs: vec![t],
                });
            }
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
    }
    let loss = if count == 0 { 0.0 } else { total / count as f64 };
    Ok((loss, probs, count))
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = matmul(
            &Tensor::matrix(3, 4, a.clone()).unwrap(),
            &Tensor::matrix(4, 2, b.clone()).unwrap(),
        )
        .unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b, 3, 4, 2)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposes_match_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let want = naive_matmul(&a, &b, m, k, n);
        // Store transposed copies and ask gemm to undo the transpose.
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c, false);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        gemm(m, k, n, &a, false, &b, false, &mut c, true);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let err = matmul(&Tensor::zeros(&[3, 4]), &Tensor::zeros(&[3, 2])).unwrap_err();
        match err {
            ProbeError::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![3, 4]);
                assert_eq!(rhs, vec![3, 2]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::matrix(4, 9, (0..36).map(|_| rng.gen_range(-30.0..30.0)).collect()).unwrap();
        let p = softmax_rows(&x);
        for r in 0..4 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.row(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero_before_affine() {
        let x = Tensor::matrix(1, 6, vec![3.25; 6]).unwrap();
        let out = layer_norm(&x, &Tensor::filled(&[6], 1.0), &Tensor::zeros(&[6])).unwrap();
        assert!(out.xhat.data().iter().all(|&v| v == 0.0));
        assert!(out.y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gelu_known_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // Φ(1) = 0.8413447460685429
        assert!((gelu_scalar(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((gelu_scalar(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-15);
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::matrix(7, 4, (0..28).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let (q, k, v) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
        let (_, probs) = causal_attention(&q, &k, &v, 2, &segs).unwrap();
        let offs = attention_offsets(&segs, 2);
        for (si, s) in segs.iter().enumerate() {
            for h in 0..2 {
                let block = &probs[offs[si * 2 + h]..][..s.len * s.len];
                for i in 0..s.len {
                    let row = &block[i * s.len..(i + 1) * s.len];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(row[i + 1..].iter().all(|&p| p == 0.0));
                }
            }
        }
    }

    #[test]
    fn cross_entropy_with_no_targets_is_zero() {
        let (loss, _, n) = cross_entropy(&Tensor::zeros(&[3, 5]), &[None, None, None]).unwrap();
        assert_eq!((loss, n), (0.0, 0));
    }

    #[test]
    fn argmax_ties_to_smallest_index() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
    }
}
