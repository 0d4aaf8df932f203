// SPDX-License-Identifier: MIT OR Apache-2.0

//! Untaped inference with observation and intervention points.

use super::{Component, TransformerParams};
use crate::error::{ProbeError, Result};
use crate::nn::kernels::{self, Segment};
use crate::nn::Tensor;

/// A point on the residual stream. `Input` is the embedding sum (the stream
/// entering layer 0); `Mid(l)` follows the attention update of layer `l`;
/// `Post(l)` follows its MLP update and is the stream entering layer `l + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualSite {
    Input,
    Mid(usize),
    Post(usize),
}

/// Callbacks invoked during [`forward_with_hook`]. Layers are 0-based.
pub trait ForwardHook {
    /// Sees the residual stream at `site`, all positions.
    fn residual(&mut self, _site: ResidualSite, _x: &Tensor) {}

    /// Sees, and may overwrite, a component's output `[T, d_model]` before it
    /// is added into the residual stream.
    fn component(&mut self, _layer: usize, _component: Component, _out: &mut Tensor) -> Result<()> {
        Ok(())
    }
}

pub struct NoHook;

impl ForwardHook for NoHook {}

fn check_tokens(params: &TransformerParams, tokens: &[usize]) -> Result<()> {
    let c = &params.config;
    if tokens.len() > c.max_seq_len {
        return Err(ProbeError::SeqTooLong {
            len: tokens.len(),
            max: c.max_seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= c.vocab_size) {
        return Err(ProbeError::InvalidInput(format!("token id {t} outside vocabulary of {}", c.vocab_size)));
    }
    Ok(())
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    kernels::add_row(&kernels::matmul(x, w)?, b)
}

/// Runs one sequence and returns logits `[T, vocab]`.
pub fn forward_with_hook(params: &TransformerParams, tokens: &[usize], hook: &mut dyn ForwardHook) -> Result<Tensor> {
    check_tokens(params, tokens)?;
    let t = tokens.len();
    let positions: Vec<usize> = (0..t).collect();
    let seg = [Segment { start: 0, len: t }];
    let mut x = kernels::add(
        &kernels::embed(&params.tok_embed, tokens)?,
        &kernels::embed(&params.pos_embed, &positions)?,
    )?;
    hook.residual(ResidualSite::Input, &x);
    for (l, b) in params.blocks.iter().enumerate() {
        let h = kernels::layer_norm(&x, &b.ln1_gamma, &b.ln1_beta)?.y;
        let q = linear(&h, &b.w_q, &b.b_q)?;
        let k = linear(&h, &b.w_k, &b.b_k)?;
        let v = linear(&h, &b.w_v, &b.b_v)?;
        let (heads, _) = kernels::causal_attention(&q, &k, &v, params.config.n_heads, &seg)?;
        let mut attn = linear(&heads, &b.w_o, &b.b_o)?;
        hook.component(l, Component::Attn, &mut attn)?;
        x.add_assign(&attn);
        hook.residual(ResidualSite::Mid(l), &x);

        let h = kernels::layer_norm(&x, &b.ln2_gamma, &b.ln2_beta)?.y;
        let mut mlp = linear(&kernels::gelu(&linear(&h, &b.w_fc, &b.b_fc)?), &b.w_proj, &b.b_proj)?;
        hook.component(l, Component::Mlp, &mut mlp)?;
        x.add_assign(&mlp);
        hook.residual(ResidualSite::Post(l), &x);
    }
    params.unembed_rows(&x, true)
}

pub fn forward(params: &TransformerParams, tokens: &[usize]) -> Result<Tensor> {
    forward_with_hook(params, tokens, &mut NoHook)
}

/// Every residual-stream state and component output of one forward pass.
///
/// The stream is stored once: `x_post(l)` and `x_pre(l + 1)` are the same
/// tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCache {
    resid: Vec<Tensor>,
    attn_out: Vec<Tensor>,
    mlp_out: Vec<Tensor>,
    pub logits: Tensor,
}

impl ResidualCache {
    pub fn n_layers(&self) -> usize {
        self.attn_out.len()
    }

    pub fn seq_len(&self) -> usize {
        self.logits.rows()
    }

    pub fn x_pre(&self, layer: usize) -> &Tensor {
        &self.resid[2 * layer]
    }

    pub fn x_mid(&self, layer: usize) -> &Tensor {
        &self.resid[2 * layer + 1]
    }

    pub fn x_post(&self, layer: usize) -> &Tensor {
        &self.resid[2 * layer + 2]
    }

    pub fn attn_out(&self, layer: usize) -> &Tensor {
        &self.attn_out[layer]
    }

    pub fn mlp_out(&self, layer: usize) -> &Tensor {
        &self.mlp_out[layer]
    }

    pub fn component_out(&self, layer: usize, component: Component) -> &Tensor {
        match component {
            Component::Attn => self.attn_out(layer),
            Component::Mlp => self.mlp_out(layer),
        }
    }
}

#[derive(Default)]
struct CacheHook {
    resid: Vec<Tensor>,
    attn_out: Vec<Tensor>,
    mlp_out: Vec<Tensor>,
}

impl ForwardHook for CacheHook {
    fn residual(&mut self, _site: ResidualSite, x: &Tensor) {
        self.resid.push(x.clone());
    }

    fn component(&mut self, _layer: usize, component: Component, out: &mut Tensor) -> Result<()> {
        match component {
            Component::Attn => self.attn_out.push(out.clone()),
            Component::Mlp => self.mlp_out.push(out.clone()),
        }
        Ok(())
    }
}

pub fn forward_cached(params: &TransformerParams, tokens: &[usize]) -> Result<ResidualCache> {
    let mut hook = CacheHook::default();
    let logits = forward_with_hook(params, tokens, &mut hook)?;
    Ok(ResidualCache {
        resid: hook.resid,
        attn_out: hook.attn_out,
        mlp_out: hook.mlp_out,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params() -> TransformerParams {
        TransformerParams::init(ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 20,
            max_seq_len: 12,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn cache_matches_plain_forward() {
        let p = params();
        let toks = [1, 4, 9, 2, 2, 7];
        let cache = forward_cached(&p, &toks).unwrap();
        assert_eq!(cache.logits, forward(&p, &toks).unwrap());
        assert_eq!(cache.n_layers(), 3);
        assert_eq!(cache.seq_len(), 6);
        for l in 0..3 {
            let mut mid = cache.x_pre(l).clone();
            mid.add_assign(cache.attn_out(l));
            assert_eq!(&mid, cache.x_mid(l));
        }
    }

    #[test]
    fn rejects_long_and_foreign_input() {
        let p = params();
        assert!(matches!(forward(&p, &[0; 13]), Err(ProbeError::SeqTooLong { len: 13, max: 12 })));
        assert!(matches!(forward(&p, &[20]), Err(ProbeError::InvalidInput(_))));
    }
}
