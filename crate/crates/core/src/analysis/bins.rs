// SPDX-License-Identifier: MIT OR Apache-2.0

//! Magnitude bins for probability shifts, fixed or derived from the data.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::patching::{PatchOutcome, SourceRole};

pub const PAPER_THRESHOLDS: [f64; 4] = [0.075, 0.10, 0.13, 0.20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinProvenance {
    PaperFixed,
    DataDerived,
}

/// Four ascending cut points splitting `|Δ|` into bins 1 to 5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeBins {
    pub thresholds: [f64; 4],
    pub provenance: BinProvenance,
}

impl MagnitudeBins {
    /// Bins are closed below: a value equal to a threshold moves up.
    pub fn bin(&self, delta: f64) -> u8 {
        let m = delta.abs();
        1 + self.thresholds.iter().filter(|&&t| t <= m).count() as u8
    }
}

pub fn paper_bins() -> MagnitudeBins {
    MagnitudeBins {
        thresholds: PAPER_THRESHOLDS,
        provenance: BinProvenance::PaperFixed,
    }
}

/// Means of the largest 100%, 75%, 50% and 25% of `|Δ|`, sorted ascending.
/// A fraction of `n` values keeps `ceil(n * k / 4)` of them.
pub fn derive_bins(deltas: &[f64]) -> Result<MagnitudeBins> {
    if deltas.len() < 4 || deltas.iter().any(|d| !d.is_finite()) {
        return Err(ProbeError::InvalidInput(format!(
            "deriving bins needs at least 4 finite deltas, got {}",
            deltas.len()
        )));
    }
    let mut mags: Vec<f64> = deltas.iter().map(|d| d.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let n = mags.len();
    let mut means: Vec<f64> = [4usize, 3, 2, 1]
        .iter()
        .map(|&k| {
            let take = (n * k).div_ceil(4);
            mags[..take].iter().sum::<f64>() / take as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let ascending = means.windows(2).all(|w| w[0] < w[1]);
    let inside = means.iter().all(|&m| m > 0.0 && m < 1.0);
    if !ascending || !inside {
        return Err(ProbeError::DegenerateDistribution(means));
    }
    Ok(MagnitudeBins {
        thresholds: [means[0], means[1], means[2], means[3]],
        provenance: BinProvenance::DataDerived,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Plus => "+",
            Self::Minus => "-",
        })
    }
}

/// Bin of `|Δ_target|` and its sign; zero counts as positive.
pub fn bin_outcome(outcome: &PatchOutcome, bins: &MagnitudeBins, target: SourceRole) -> (u8, Sign) {
    let d = outcome.delta(target);
    (bins.bin(d), if d < 0.0 { Sign::Minus } else { Sign::Plus })
}

/// The bins a strategy settled on, with the reason for any fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct BinChoice {
    pub bins: MagnitudeBins,
    pub fallback: Option<String>,
}

pub trait BinStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn choose(&self, deltas: &[f64]) -> BinChoice;
}

pub struct PaperBinning;

impl BinStrategy for PaperBinning {
    fn name(&self) -> &'static str {
        "paper"
    }

    fn choose(&self, _deltas: &[f64]) -> BinChoice {
        BinChoice {
            bins: paper_bins(),
            fallback: None,
        }
    }
}

/// Derives thresholds from the observed shifts; on a degenerate
/// distribution it reports the reason and uses the fixed thresholds.
pub struct DerivedBinning;

impl BinStrategy for DerivedBinning {
    fn name(&self) -> &'static str {
        "derived"
    }

    fn choose(&self, deltas: &[f64]) -> BinChoice {
        match derive_bins(deltas) {
            Ok(bins) => BinChoice { bins, fallback: None },
            Err(e) => {
                log::warn!("{e}; falling back to the fixed thresholds");
                BinChoice {
                    bins: paper_bins(),
                    fallback: Some(e.to_string()),
                }
            }
        }
    }
}

pub fn bin_strategy_names() -> &'static [&'static str] {
    &["paper", "derived"]
}

pub fn bin_strategy(name: &str) -> Result<Box<dyn BinStrategy>> {
    match name {
        "paper" => Ok(Box::new(PaperBinning)),
        "derived" => Ok(Box::new(DerivedBinning)),
        other => Err(ProbeError::InvalidConfig(format!(
            "unknown bins mode {other:?}, expected one of {:?}",
            bin_strategy_names()
        ))),
    }
}
