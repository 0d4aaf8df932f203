// SPDX-License-Identifier: MIT OR Apache-2.0

//! The differentiable training graph over a packed batch of sequences.

use super::TransformerParams;
use crate::error::{ProbeError, Result};
use crate::nn::{Segment, Tape, Var};

/// Several sequences laid end to end. Attention never crosses a segment and
/// positions restart at 0 in each one.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub segments: Vec<Segment>,
}

impl Batch {
    /// Next-token targets for every position but the last of each sequence.
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let mut b = Batch {
            tokens: Vec::new(),
            positions: Vec::new(),
            targets: Vec::new(),
            segments: Vec::new(),
        };
        for s in seqs {
            let s = s.as_ref();
            b.segments.push(Segment {
                start: b.tokens.len(),
                len: s.len(),
            });
            for (i, &t) in s.iter().enumerate() {
                b.tokens.push(t);
                b.positions.push(i);
                b.targets.push(s.get(i + 1).copied());
            }
        }
        b
    }

    pub fn n_targets(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Records the mean cross-entropy of `batch` on a fresh tape. Parameter `i`
/// in [`TransformerParams::named_tensors`] order is registered under key `i`.
pub fn loss_on_tape(params: &TransformerParams, batch: &Batch) -> Result<(Tape, Var)> {
    let c = &params.config;
    if let Some(s) = batch.segments.iter().find(|s| s.len > c.max_seq_len) {
        return Err(ProbeError::SeqTooLong {
            len: s.len,
            max: c.max_seq_len,
        });
    }
    if let Some(&t) = batch.tokens.iter().find(|&&t| t >= c.vocab_size) {
        return Err(ProbeError::InvalidInput(format!("token id {t} outside vocabulary of {}", c.vocab_size)));
    }
    let mut tape = Tape::new();
    let p: Vec<Var> = params
        .tensors()
        .into_iter()
        .enumerate()
        .map(|(i, t)| tape.param(i, t.clone()))
        .collect();
    let (tok, pos) = (p[0], p[1]);
    let mut x = {
        let te = tape.embed(tok, &batch.tokens)?;
        let pe = tape.embed(pos, &batch.positions)?;
        tape.add(te, pe)?
    };
    for l in 0..c.n_layers {
        let w = &p[2 + 16 * l..2 + 16 * (l + 1)];
        let h = tape.layer_norm(x, w[0], w[1])?;
        let q = tape.linear(h, w[2], w[3])?;
        let k = tape.linear(h, w[4], w[5])?;
        let v = tape.linear(h, w[6], w[7])?;
        let heads = tape.causal_attention(q, k, v, c.n_heads, &batch.segments)?;
        let attn = tape.linear(heads, w[8], w[9])?;
        x = tape.add(x, attn)?;
        let h = tape.layer_norm(x, w[10], w[11])?;
        let f = tape.linear(h, w[12], w[13])?;
        let f = tape.gelu(f)?;
        let mlp = tape.linear(f, w[14], w[15])?;
        x = tape.add(x, mlp)?;
    }
    let base = 2 + 16 * c.n_layers;
    let h = tape.layer_norm(x, p[base], p[base + 1])?;
    let logits = tape.matmul(h, p[base + 2])?;
    let loss = tape.cross_entropy(logits, &batch.targets)?;
    Ok((tape, loss))
}
