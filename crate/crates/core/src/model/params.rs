// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{ProbeError, Result};
use crate::nn::kernels;
use crate::nn::Tensor;

/// Weights of one pre-LN block. Linear weights are stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln1.gamma", "ln1.beta", "attn.w_q", "attn.b_q", "attn.w_k", "attn.b_k", "attn.w_v", "attn.b_v",
    "attn.w_o", "attn.b_o", "ln2.gamma", "ln2.beta", "mlp.w_fc", "mlp.b_fc", "mlp.w_proj", "mlp.b_proj",
];

impl BlockParams {
    fn fields(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gamma, &self.ln1_beta, &self.w_q, &self.b_q, &self.w_k, &self.b_k, &self.w_v, &self.b_v,
            &self.w_o, &self.b_o, &self.ln2_gamma, &self.ln2_beta, &self.w_fc, &self.b_fc, &self.w_proj,
            &self.b_proj,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gamma, &mut self.ln1_beta, &mut self.w_q, &mut self.b_q, &mut self.w_k, &mut self.b_k,
            &mut self.w_v, &mut self.b_v, &mut self.w_o, &mut self.b_o, &mut self.ln2_gamma, &mut self.ln2_beta,
            &mut self.w_fc, &mut self.b_fc, &mut self.w_proj, &mut self.b_proj,
        ]
    }
}

/// All learnable tensors of the model, with the configuration they realize.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub config: ModelConfig,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub lnf_gamma: Tensor,
    pub lnf_beta: Tensor,
    /// `[d_model, vocab]`, untied from `tok_embed`.
    pub unembed: Tensor,
}

impl TransformerParams {
    /// Gaussian weights with standard deviation `1/sqrt(d_model)`, zero
    /// biases, unit layer-norm gains. Fully determined by `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 1.0 / (config.d_model as f64).sqrt())
            .map_err(|e| ProbeError::InvalidConfig(e.to_string()))?;
        let mut gauss = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect())
                .expect("shape matches length")
        };
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let tok_embed = gauss(&[v, d]);
        let pos_embed = gauss(&[config.max_seq_len, d]);
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams {
                ln1_gamma: Tensor::filled(&[d], 1.0),
                ln1_beta: Tensor::zeros(&[d]),
                w_q: gauss(&[d, d]),
                b_q: Tensor::zeros(&[d]),
                w_k: gauss(&[d, d]),
                b_k: Tensor::zeros(&[d]),
                w_v: gauss(&[d, d]),
                b_v: Tensor::zeros(&[d]),
                w_o: gauss(&[d, d]),
                b_o: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::filled(&[d], 1.0),
                ln2_beta: Tensor::zeros(&[d]),
                w_fc: gauss(&[d, f]),
                b_fc: Tensor::zeros(&[f]),
                w_proj: gauss(&[f, d]),
                b_proj: Tensor::zeros(&[d]),
            })
            .collect();
        let unembed = gauss(&[d, v]);
        Ok(Self {
            config,
            tok_embed,
            pos_embed,
            blocks,
            lnf_gamma: Tensor::filled(&[d], 1.0),
            lnf_beta: Tensor::zeros(&[d]),
            unembed,
        })
    }

    /// Every tensor with its stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_embed".to_string(), &self.tok_embed), ("pos_embed".to_string(), &self.pos_embed)];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        out.push(("ln_f.gamma".to_string(), &self.lnf_gamma));
        out.push(("ln_f.beta".to_string(), &self.lnf_beta));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_embed, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.push(&mut self.lnf_gamma);
        out.push(&mut self.lnf_beta);
        out.push(&mut self.unembed);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Rebuilds parameters from tensors listed in [`Self::named_tensors`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let slots = p.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(ProbeError::CorruptCheckpoint(format!(
                "expected {} tensors, found {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(ProbeError::CorruptCheckpoint(format!(
                    "tensor shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(p)
    }

    /// Tensor names for a configuration, in storage order.
    pub(crate) fn init_names(config: &ModelConfig) -> Result<Vec<String>> {
        config.validate()?;
        let mut names = vec!["tok_embed".to_string(), "pos_embed".to_string()];
        for l in 0..config.n_layers {
            names.extend(BLOCK_FIELDS.iter().map(|f| format!("blocks.{l}.{f}")));
        }
        names.extend(["ln_f.gamma", "ln_f.beta", "unembed"].map(String::from));
        Ok(names)
    }

    fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let z = |s: &[usize]| Tensor::zeros(s);
        Ok(Self {
            config,
            tok_embed: z(&[v, d]),
            pos_embed: z(&[config.max_seq_len, d]),
            blocks: (0..config.n_layers)
                .map(|_| BlockParams {
                    ln1_gamma: z(&[d]),
                    ln1_beta: z(&[d]),
                    w_q: z(&[d, d]),
                    b_q: z(&[d]),
                    w_k: z(&[d, d]),
                    b_k: z(&[d]),
                    w_v: z(&[d, d]),
                    b_v: z(&[d]),
                    w_o: z(&[d, d]),
                    b_o: z(&[d]),
                    ln2_gamma: z(&[d]),
                    ln2_beta: z(&[d]),
                    w_fc: z(&[d, f]),
                    b_fc: z(&[f]),
                    w_proj: z(&[f, d]),
                    b_proj: z(&[d]),
                })
                .collect(),
            lnf_gamma: z(&[d]),
            lnf_beta: z(&[d]),
            unembed: z(&[d, v]),
        })
    }

    /// Projects residual vectors `[rows, d_model]` to vocabulary logits,
    /// optionally through the final layer norm first.
    pub fn unembed_rows(&self, x: &Tensor, final_ln: bool) -> Result<Tensor> {
        if final_ln {
            let normed = kernels::layer_norm(x, &self.lnf_gamma, &self.lnf_beta)?.y;
            kernels::matmul(&normed, &self.unembed)
        } else {
            kernels::matmul(x, &self.unembed)
        }
    }

    /// Exact bytes of every tensor, for hashing and equality checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.n_params() * 8);
        for t in self.tensors() {
            t.write_to(&mut out).expect("writing to a Vec cannot fail");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size: 40,
            max_seq_len: 16,
            seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = TransformerParams::init(small()).unwrap();
        let b = TransformerParams::init(small()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn shapes_follow_config() {
        let c = small();
        let p = TransformerParams::init(c).unwrap();
        assert_eq!(p.blocks.len(), 4);
        assert_eq!(p.tok_embed.shape(), &[40, 32]);
        assert_eq!(p.pos_embed.shape(), &[16, 32]);
        assert_eq!(p.blocks[0].w_fc.shape(), &[32, 64]);
        assert_eq!(p.blocks[0].w_proj.shape(), &[64, 32]);
        assert_eq!(p.unembed.shape(), &[32, 40]);
        assert_eq!(p.named_tensors().len(), 2 + 16 * 4 + 3);
        assert!(p.is_finite());
    }

    #[test]
    fn from_tensors_round_trip() {
        let p = TransformerParams::init(small()).unwrap();
        let q = TransformerParams::from_tensors(p.config, p.tensors().into_iter().cloned().collect()).unwrap();
        assert_eq!(p, q);
    }
}
