// SPDX-License-Identifier: MIT OR Apache-2.0

//! Metrics over patching outcomes and model confidence.

mod bins;
pub mod report;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bins::{
    bin_outcome, bin_strategy, bin_strategy_names, derive_bins, paper_bins, BinChoice, BinProvenance, BinStrategy,
    DerivedBinning, MagnitudeBins, PaperBinning, Sign, PAPER_THRESHOLDS,
};

use crate::corpus::{AttributeType, PromptCase, TokenId};
use crate::error::{ProbeError, Result};
use crate::model::{Component, TransformerParams};
use crate::nn::kernels;
use crate::patching::{clean_run, ensure_same_architecture, PatchMode, PatchOutcome, SourceRole};

/// True iff `t_s` is the top token after the patch but was not before.
/// Ties go to the smallest token id.
pub fn steering_success(before: &[f64], after: &[f64], t_s: usize) -> bool {
    kernels::argmax(after) == t_s && kernels::argmax(before) != t_s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringStat {
    pub mode: PatchMode,
    pub source_role: SourceRole,
    pub layer: usize,
    pub component: Component,
    pub attribute_type: AttributeType,
    pub n_attempts: usize,
    pub n_success: usize,
    pub rate: f64,
}

/// Success counts per (mode, t_s, layer, component, attribute type).
pub fn steering_stats(outcomes: &[PatchOutcome]) -> Vec<SteeringStat> {
    type Key = (PatchMode, SourceRole, usize, Component, AttributeType);
    let mut groups: BTreeMap<Key, (usize, usize)> = BTreeMap::new();
    for o in outcomes {
        let key = (o.mode, o.source_role, o.component_ref.layer, o.component_ref.component, o.attribute_type);
        let e = groups.entry(key).or_default();
        e.0 += 1;
        e.1 += usize::from(o.steered);
    }
    groups
        .into_iter()
        .map(|((mode, source_role, layer, component, attribute_type), (n, s))| SteeringStat {
            mode,
            source_role,
            layer,
            component,
            attribute_type,
            n_attempts: n,
            n_success: s,
            rate: s as f64 / n as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactEntry {
    pub layer: usize,
    pub component: Component,
    pub effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenImpactRow {
    pub attribute_type: AttributeType,
    pub source_token: TokenId,
    /// Number of distinct persons patched with this source token.
    pub n_cases: usize,
    /// Highest mean shift of the source token first; at most `k` entries.
    pub ranking: Vec<ImpactEntry>,
    /// Among the five most frequent source tokens of its attribute type.
    pub frequent: bool,
}

pub const FREQUENT_PER_CATEGORY: usize = 5;

/// For each source token, components ranked by the mean shift they cause
/// in that token's probability. Equal effects are ordered by (layer,
/// component). Frequency ties are broken by ascending token id.
pub fn token_impact_table(outcomes: &[PatchOutcome], k: usize) -> Result<Vec<TokenImpactRow>> {
    if outcomes.is_empty() {
        return Err(ProbeError::InvalidInput("no outcomes to rank".into()));
    }
    type Key = (AttributeType, TokenId);
    type Sums = BTreeMap<(usize, Component), (f64, usize)>;
    let mut sums: BTreeMap<Key, Sums> = BTreeMap::new();
    let mut persons: BTreeMap<Key, BTreeSet<usize>> = BTreeMap::new();
    for o in outcomes {
        let key = (o.attribute_type, o.source_token);
        let e = sums
            .entry(key)
            .or_default()
            .entry((o.component_ref.layer, o.component_ref.component))
            .or_default();
        e.0 += o.delta(o.source_role);
        e.1 += 1;
        persons.entry(key).or_default().insert(o.person_id);
    }
    let mut frequent: BTreeSet<Key> = BTreeSet::new();
    for attr in AttributeType::ALL {
        let mut tokens: Vec<(usize, TokenId)> = persons
            .iter()
            .filter(|((a, _), _)| *a == attr)
            .map(|((_, t), p)| (p.len(), *t))
            .collect();
        tokens.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        frequent.extend(tokens.iter().take(FREQUENT_PER_CATEGORY).map(|&(_, t)| (attr, t)));
    }
    Ok(sums
        .into_iter()
        .map(|(key, comps)| {
            let mut ranking: Vec<ImpactEntry> = comps
                .into_iter()
                .map(|((layer, component), (sum, n))| ImpactEntry {
                    layer,
                    component,
                    effect: sum / n as f64,
                })
                .collect();
            ranking.sort_by(|a, b| {
                b.effect
                    .total_cmp(&a.effect)
                    .then(a.layer.cmp(&b.layer))
                    .then(a.component.cmp(&b.component))
            });
            ranking.truncate(k);
            TokenImpactRow {
                attribute_type: key.0,
                source_token: key.1,
                n_cases: persons[&key].len(),
                ranking,
                frequent: frequent.contains(&key),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRow {
    pub person_id: usize,
    pub attribute_type: AttributeType,
    pub p_mix_t1: f64,
    pub p_mix_t2: f64,
    pub max_mix: f64,
    pub p_clean_t1: f64,
    /// The clean model's top token is `t1`.
    pub clean_top1_is_t1: bool,
    /// Both `t1` and `t2` are among the mixed model's five most likely tokens.
    pub mix_top5_has_both: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub rows: Vec<ConfidenceRow>,
    pub mean_p_mix_t1: f64,
    pub mean_p_mix_t2: f64,
    pub mean_max_mix: f64,
    pub mean_p_clean_t1: f64,
    pub clean_top1_accuracy: f64,
    pub mix_top5_both_rate: f64,
}

/// Indices of the `k` largest values, ties by ascending index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Next-token confidence of both models on every case's prompt.
pub fn confidence_report(
    mix: &TransformerParams,
    clean: &TransformerParams,
    cases: &[PromptCase],
) -> Result<ConfidenceReport> {
    ensure_same_architecture(mix, clean)?;
    if cases.is_empty() {
        return Err(ProbeError::InvalidInput("no cases".into()));
    }
    let rows: Vec<ConfidenceRow> = cases
        .par_iter()
        .map(|c| {
            let m = clean_run(mix, &c.prompt_tokens)?.final_probs;
            let k = clean_run(clean, &c.prompt_tokens)?.final_probs;
            let (t1, t2) = (c.t1 as usize, c.t2 as usize);
            let top5 = top_k(&m, 5);
            Ok(ConfidenceRow {
                person_id: c.person_id,
                attribute_type: c.attribute_type,
                p_mix_t1: m[t1],
                p_mix_t2: m[t2],
                max_mix: m[t1].max(m[t2]),
                p_clean_t1: k[t1],
                clean_top1_is_t1: kernels::argmax(&k) == t1,
                mix_top5_has_both: top5.contains(&t1) && top5.contains(&t2),
            })
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&ConfidenceRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(ConfidenceReport {
        mean_p_mix_t1: mean(&|r| r.p_mix_t1),
        mean_p_mix_t2: mean(&|r| r.p_mix_t2),
        mean_max_mix: mean(&|r| r.max_mix),
        mean_p_clean_t1: mean(&|r| r.p_clean_t1),
        clean_top1_accuracy: mean(&|r| f64::from(u8::from(r.clean_top1_is_t1))),
        mix_top5_both_rate: mean(&|r| f64::from(u8::from(r.mix_top5_has_both))),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::ComponentRef;

    #[test]
    fn steering_needs_a_flip() {
        assert!(steering_success(&[0.6, 0.4], &[0.4, 0.6], 1));
        assert!(!steering_success(&[0.4, 0.6], &[0.3, 0.7], 1));
        assert!(!steering_success(&[0.5, 0.5], &[0.5, 0.5], 1));
    }

    fn outcome(person: usize, layer: usize, token: TokenId, d: f64) -> PatchOutcome {
        PatchOutcome {
            person_id: person,
            attribute_type: AttributeType::Company,
            mode: PatchMode::SameModel,
            source_role: SourceRole::T1,
            source_token: token,
            donor_person_id: 99,
            component_ref: ComponentRef::new(layer, Component::Attn),
            prob_t1_before: 0.2,
            prob_t1_after: 0.2 + d,
            prob_t2_before: 0.3,
            prob_t2_after: 0.3,
            delta_t1: d,
            delta_t2: 0.0,
            steered: false,
            top1_before: 0,
            top1_after: 0,
        }
    }

    #[test]
    fn single_outcome_ranks_first() {
        let t = token_impact_table(&[outcome(0, 3, 7, 0.1)], 6).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].ranking.len(), 1);
        assert_eq!((t[0].ranking[0].layer, t[0].ranking[0].effect), (3, 0.1));
        assert!(t[0].frequent);
    }

    #[test]
    fn ranking_is_truncated_not_padded() {
        let outs: Vec<_> = (1..=3).map(|l| outcome(0, l, 7, l as f64 * 0.01)).collect();
        let t = token_impact_table(&outs, 6).unwrap();
        assert_eq!(t[0].ranking.iter().map(|e| e.layer).collect::<Vec<_>>(), vec![3, 2, 1]);
        let t = token_impact_table(&outs, 2).unwrap();
        assert_eq!(t[0].ranking.len(), 2);
    }

    #[test]
    fn steering_stats_count() {
        let mut a = outcome(0, 1, 7, 0.3);
        a.steered = true;
        let b = outcome(1, 1, 7, 0.0);
        let s = steering_stats(&[a, b]);
        assert_eq!((s[0].n_attempts, s[0].n_success, s[0].rate), (2, 1, 0.5));
    }
}
