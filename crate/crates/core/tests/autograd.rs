// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode gradients against central differences of the same graph.

use conflict_probe::nn::{Segment, Tape, Tensor, Var};
use conflict_probe::Result;
use proptest::prelude::*;

type Graph = fn(&mut Tape, &[Var], &Ctx) -> Result<Var>;

struct Ctx {
    targets: Vec<Option<usize>>,
    segments: Vec<Segment>,
    heads: usize,
    mixer: Tensor,
}

fn loss_of(graph: Graph, inputs: &[Tensor], ctx: &Ctx) -> (f64, Vec<Tensor>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| tape.param(i, t.clone())).collect();
    let loss = graph(&mut tape, &vars, ctx).unwrap();
    let value = tape.value(loss).item().unwrap();
    let grads = tape.backward(loss).unwrap();
    (value, (0..inputs.len()).map(|i| grads[&i].clone()).collect())
}

fn check(graph: Graph, inputs: Vec<Tensor>, ctx: &Ctx) -> f64 {
    let (_, grads) = loss_of(graph, &inputs, ctx);
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let at = |offset: f64| {
                let mut moved = inputs.clone();
                moved[i].data_mut()[j] += offset;
                loss_of(graph, &moved, ctx).0
            };
            // Five-point central difference.
            let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            let analytic = grads[i].data()[j];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Linear, layer norm, GELU and cross-entropy.
fn mlp_graph(t: &mut Tape, v: &[Var], ctx: &Ctx) -> Result<Var> {
    let h = t.linear(v[0], v[1], v[2])?;
    let n = t.layer_norm(h, v[3], v[4])?;
    let g = t.gelu(n)?;
    let logits = t.matmul(g, v[5])?;
    t.cross_entropy(logits, &ctx.targets)
}

/// Packed causal attention followed by a fixed mixing projection.
fn attention_graph(t: &mut Tape, v: &[Var], ctx: &Ctx) -> Result<Var> {
    let a = t.causal_attention(v[0], v[1], v[2], ctx.heads, &ctx.segments)?;
    let m = t.constant(ctx.mixer.clone());
    let mixed = t.matmul(a, m)?;
    let s = t.softmax(mixed)?;
    let e = t.add(s, a)?;
    let biased = t.add_row(e, v[4])?;
    let g = t.gelu(biased)?;
    let head = t.sum(g)?;
    let emb = t.embed(v[3], &[0, 2, 1])?;
    let emb = t.gelu(emb)?;
    let tail = t.sum(emb)?;
    let tail = t.scale(tail, 0.3)?;
    t.add(head, tail)
}

/// Smallest per-row variance of `x · w + b`. Near zero the layer norm scale
/// approaches `1/sqrt(eps)` and a finite step no longer sees a smooth function.
fn min_row_variance(x: &Tensor, w: &Tensor, b: &Tensor, rows: usize, d: usize) -> f64 {
    let (x, w, b) = (x.data(), w.data(), b.data());
    let mut least = f64::INFINITY;
    for r in 0..rows {
        let h: Vec<f64> = (0..d).map(|j| b[j] + (0..d).map(|k| x[r * d + k] * w[k * d + j]).sum::<f64>()).collect();
        let mean = h.iter().sum::<f64>() / d as f64;
        least = least.min(h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64);
    }
    least
}

fn matrix(rows: usize, cols: usize, vals: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, vals[..rows * cols].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mlp_gradients_match_differences(
        rows in 1usize..5,
        d in 2usize..5,
        vocab in 2usize..6,
        vals in prop::collection::vec(-1.5f64..1.5, 200),
        tsel in prop::collection::vec(0usize..100, 5),
    ) {
        let inputs = vec![
            matrix(rows, d, &vals),
            matrix(d, d, &vals[20..]),
            Tensor::from_vec(vals[50..50 + d].to_vec()),
            Tensor::from_vec(vals[60..60 + d].iter().map(|x| 1.0 + 0.3 * x).collect()),
            Tensor::from_vec(vals[70..70 + d].to_vec()),
            matrix(d, vocab, &vals[80..]),
        ];
        prop_assume!(min_row_variance(&inputs[0], &inputs[1], &inputs[2], rows, d) > 0.05);
        let targets = (0..rows).map(|r| if tsel[r] % 4 == 0 { None } else { Some(tsel[r] % vocab) }).collect();
        let ctx = Ctx { targets, segments: vec![], heads: 1, mixer: Tensor::scalar(0.0) };
        let worst = check(mlp_graph, inputs, &ctx);
        prop_assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn attention_gradients_match_differences(
        split in 1usize..4,
        heads in 1usize..3,
        vals in prop::collection::vec(-1.0f64..1.0, 200),
    ) {
        let rows = 4;
        let d = 2 * heads;
        let inputs = vec![
            matrix(rows, d, &vals),
            matrix(rows, d, &vals[20..]),
            matrix(rows, d, &vals[40..]),
            matrix(3, d, &vals[60..]),
            Tensor::from_vec(vals[80..80 + d].to_vec()),
        ];
        let segments = vec![Segment { start: 0, len: split }, Segment { start: split, len: rows - split }];
        let ctx = Ctx { targets: vec![], segments, heads, mixer: matrix(d, d, &vals[100..]) };
        let worst = check(attention_graph, inputs, &ctx);
        prop_assert!(worst < 1e-4, "max relative error {worst}");
    }
}
