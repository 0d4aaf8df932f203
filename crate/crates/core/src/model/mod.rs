// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-LN decoder-only transformer with residual-stream instrumentation.

mod checkpoint;
mod forward;
mod gradcheck;
mod graph;
mod params;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, Provenance, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use forward::{forward, forward_cached, forward_with_hook, ForwardHook, NoHook, ResidualCache, ResidualSite};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, FD_STEP, REL_FLOOR};
pub use graph::{loss_on_tape, Batch};
pub use params::{BlockParams, TransformerParams};
pub use train::{train, train_triplet, PhaseHypers, TrainHyper, TrainReport, Triplet};

use crate::error::{ProbeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// The default desk configuration for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size,
            max_seq_len: 128,
            seed: 11,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ProbeError::InvalidConfig(m));
        if self.n_layers < 2 {
            return bad(format!("n_layers = {} must be at least 2", self.n_layers));
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_ff == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("d_ff, vocab_size and max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// The two sub-blocks of a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Attn,
    Mlp,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Attn => "attn",
            Self::Mlp => "mlp",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "attn" => Ok(Self::Attn),
            "mlp" => Ok(Self::Mlp),
            other => Err(format!("unknown component {other:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig { n_heads: 3, ..ModelConfig::desk(50) };
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_single_layer() {
        let c = ModelConfig { n_layers: 1, ..ModelConfig::desk(50) };
        assert!(c.validate().is_err());
        assert!(ModelConfig::desk(50).validate().is_ok());
    }
}
