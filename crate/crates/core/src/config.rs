// SPDX-License-Identifier: MIT OR Apache-2.0

//! The single TOML file that drives a pipeline run.
//!
//! ```toml
//! seed = 1
//! out_dir = "run"
//!
//! [corpus]
//! n_persons = 200
//! n_conflicted = 100
//!
//! [model]
//! n_layers = 8
//! d_model = 128
//!
//! [train.mix]
//! epochs = 40
//!
//! [probe]
//! layers = "5..8"
//! component = "attn"
//! ts = "t1"
//! bins = "paper"
//! ```
//!
//! Every key is optional; missing keys take the desk defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::bin_strategy;
use crate::corpus::{DonorChoice, PoolCounts};
use crate::error::{ProbeError, Result};
use crate::model::{ModelConfig, PhaseHypers, TrainHyper};
use crate::patching::{ComponentFilter, TsSelection};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub n_persons: usize,
    pub n_conflicted: usize,
    pub pools: PoolCounts,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            n_persons: 200,
            n_conflicted: 100,
            pools: PoolCounts::default(),
        }
    }
}

/// Architecture; the vocabulary size comes from the tokenizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        Self {
            n_layers: d.n_layers,
            d_model: d.d_model,
            n_heads: d.n_heads,
            d_ff: d.d_ff,
            max_seq_len: d.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub base: TrainHyper,
    pub mix: TrainHyper,
    pub clean: TrainHyper,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            base: TrainHyper {
                epochs: 20,
                ..TrainHyper::default()
            },
            mix: TrainHyper {
                epochs: 40,
                ..TrainHyper::default()
            },
            clean: TrainHyper {
                epochs: 20,
                ..TrainHyper::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Apply the final layer norm before every logit-lens projection.
    pub final_ln: bool,
    /// Inclusive 1-based layer range `"A..B"`; all layers when absent.
    pub layers: Option<String>,
    pub component: ComponentFilter,
    pub ts: TsSelection,
    /// `paper` or `derived`.
    pub bins: String,
    pub cmap: bool,
    pub donor: DonorChoice,
    pub impact_k: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            final_ln: true,
            layers: None,
            component: ComponentFilter::Attn,
            ts: TsSelection::T1,
            bins: "paper".into(),
            cmap: true,
            donor: DonorChoice::SmallestId,
            impact_k: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds entity pools, corpus sampling, weight init and shuffling.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub probe: ProbeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("run"),
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            probe: ProbeSection::default(),
        }
    }
}

/// Parses `"A..B"` into an inclusive pair.
pub fn parse_layer_range(s: &str) -> Result<(usize, usize)> {
    let bad = || ProbeError::InvalidConfig(format!("layer range {s:?} is not of the form A..B"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let a = a.trim().parse().map_err(|_| bad())?;
    let b = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
    Ok((a, b))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ProbeError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ProbeError::MissingArtifact(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ProbeError::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.n_persons == 0 || c.n_conflicted == 0 || c.n_conflicted > c.n_persons {
            return Err(ProbeError::InvalidConfig(format!(
                "need 0 < n_conflicted ({}) <= n_persons ({})",
                c.n_conflicted, c.n_persons
            )));
        }
        self.model_config(1).validate()?;
        for h in [&self.train.base, &self.train.mix, &self.train.clean] {
            h.validate()?;
        }
        self.layer_range()?;
        bin_strategy(&self.probe.bins)?;
        if self.probe.impact_k == 0 {
            return Err(ProbeError::InvalidConfig("impact_k must be positive".into()));
        }
        Ok(())
    }

    /// The inclusive layer range to probe, checked against the depth.
    pub fn layer_range(&self) -> Result<(usize, usize)> {
        let l = self.model.n_layers;
        let (a, b) = match &self.probe.layers {
            Some(s) => parse_layer_range(s)?,
            None => (1, l),
        };
        if a == 0 || a > b || b > l {
            return Err(ProbeError::InvalidConfig(format!("layer range {a}..{b} outside 1..={l}")));
        }
        Ok((a, b))
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.model.n_layers,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            vocab_size,
            max_seq_len: self.model.max_seq_len,
            seed: self.seed,
        }
    }

    /// Phase hyperparameters with shuffle seeds derived from the run seed.
    pub fn phase_hypers(&self) -> PhaseHypers {
        let with_seed = |h: &TrainHyper, offset: u64| TrainHyper {
            shuffle_seed: self.seed.wrapping_mul(3).wrapping_add(offset),
            ..h.clone()
        };
        PhaseHypers {
            base: with_seed(&self.train.base, 0),
            mix: with_seed(&self.train.mix, 1),
            clean: with_seed(&self.train.clean, 2),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_stable() {
        let mut c = RunConfig::default();
        c.probe.layers = Some("3..6".into());
        c.probe.donor = DonorChoice::Seeded(5);
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = RunConfig::from_toml("seed = 9\n[train.mix]\nepochs = 3\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.mix.epochs, 3);
        assert_eq!(c.train.mix.batch_size, TrainHyper::default().batch_size);
        assert_eq!(c.corpus.n_persons, 200);
    }

    #[test]
    fn rejects_inconsistent_values() {
        assert!(RunConfig::from_toml("[probe]\nlayers = \"0..3\"\n").is_err());
        assert!(RunConfig::from_toml("[probe]\nlayers = \"2..9\"\n").is_err());
        assert!(RunConfig::from_toml("[probe]\nbins = \"quartile\"\n").is_err());
        assert!(RunConfig::from_toml("[corpus]\nn_persons = 10\nn_conflicted = 11\n").is_err());
        assert!(RunConfig::from_toml("typo = 1\n").is_err());
        assert_eq!(parse_layer_range("2..=5").unwrap(), (2, 5));
    }
}
