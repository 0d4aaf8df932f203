// SPDX-License-Identifier: MIT OR Apache-2.0

//! CSV renderings of the analysis tables. Floats use Rust's shortest
//! round-trip formatting.

use std::collections::BTreeMap;

use super::{bin_outcome, ConfidenceReport, MagnitudeBins, Sign, SteeringStat, TokenImpactRow};
use crate::corpus::AttributeType;
use crate::error::{ProbeError, Result};
use crate::model::Component;
use crate::patching::{PatchMode, PatchOutcome, SourceRole};

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| ProbeError::InvalidInput(e.to_string()))
}

/// Count and fraction of outcomes per bin and sign, for both targets, within
/// each (mode, t_s, layer, component, attribute type) group. Every bin and
/// sign is listed, including empty ones.
pub fn bins_csv(outcomes: &[PatchOutcome], bins: &MagnitudeBins) -> Result<Vec<u8>> {
    type Group = (PatchMode, SourceRole, usize, Component, AttributeType, SourceRole);
    let mut counts: BTreeMap<Group, BTreeMap<(u8, Sign), usize>> = BTreeMap::new();
    for o in outcomes {
        for target in [SourceRole::T1, SourceRole::T2] {
            let key = (o.mode, o.source_role, o.component_ref.layer, o.component_ref.component, o.attribute_type, target);
            *counts.entry(key).or_default().entry(bin_outcome(o, bins, target)).or_default() += 1;
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "mode", "t_s", "layer", "component", "attribute_type", "target", "bin", "sign", "count", "fraction",
    ])?;
    for ((mode, ts, layer, comp, attr, target), cells) in &counts {
        let total: usize = cells.values().sum();
        for bin in 1..=5u8 {
            for sign in [Sign::Plus, Sign::Minus] {
                let c = cells.get(&(bin, sign)).copied().unwrap_or(0);
                w.write_record([
                    mode.to_string(),
                    ts.to_string(),
                    layer.to_string(),
                    comp.to_string(),
                    attr.to_string(),
                    target.to_string(),
                    bin.to_string(),
                    sign.to_string(),
                    c.to_string(),
                    (c as f64 / total as f64).to_string(),
                ])?;
            }
        }
    }
    finish(w)
}

pub fn steering_csv(stats: &[SteeringStat]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "mode", "t_s", "layer", "component", "attribute_type", "n_attempts", "n_success", "rate",
    ])?;
    for s in stats {
        w.write_record([
            s.mode.to_string(),
            s.source_role.to_string(),
            s.layer.to_string(),
            s.component.to_string(),
            s.attribute_type.to_string(),
            s.n_attempts.to_string(),
            s.n_success.to_string(),
            s.rate.to_string(),
        ])?;
    }
    finish(w)
}

/// One line per ranked entry; `source_piece` renders the token.
pub fn impact_csv(mode: PatchMode, rows: &[TokenImpactRow], piece: &dyn Fn(u32) -> String) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "mode", "attribute_type", "source_token", "source_piece", "n_cases", "frequent", "rank", "layer",
        "component", "effect",
    ])?;
    for r in rows {
        for (rank, e) in r.ranking.iter().enumerate() {
            w.write_record([
                mode.to_string(),
                r.attribute_type.to_string(),
                r.source_token.to_string(),
                piece(r.source_token),
                r.n_cases.to_string(),
                r.frequent.to_string(),
                (rank + 1).to_string(),
                e.layer.to_string(),
                e.component.to_string(),
                e.effect.to_string(),
            ])?;
        }
    }
    finish(w)
}

/// Per-case rows followed by one `mean` row.
pub fn confidence_csv(report: &ConfidenceReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "person_id", "attribute_type", "p_mix_t1", "p_mix_t2", "max_mix", "p_clean_t1", "clean_top1_is_t1",
        "mix_top5_has_both",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.person_id.to_string(),
            r.attribute_type.to_string(),
            r.p_mix_t1.to_string(),
            r.p_mix_t2.to_string(),
            r.max_mix.to_string(),
            r.p_clean_t1.to_string(),
            r.clean_top1_is_t1.to_string(),
            r.mix_top5_has_both.to_string(),
        ])?;
    }
    w.write_record([
        "mean".to_string(),
        "all".to_string(),
        report.mean_p_mix_t1.to_string(),
        report.mean_p_mix_t2.to_string(),
        report.mean_max_mix.to_string(),
        report.mean_p_clean_t1.to_string(),
        report.clean_top1_accuracy.to_string(),
        report.mix_top5_both_rate.to_string(),
    ])?;
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::paper_bins;
    use crate::patching::ComponentRef;

    #[test]
    fn every_bin_cell_is_listed() {
        let o = PatchOutcome {
            person_id: 0,
            attribute_type: AttributeType::University,
            mode: PatchMode::CrossModel,
            source_role: SourceRole::T1,
            source_token: 1,
            donor_person_id: 0,
            component_ref: ComponentRef::new(2, Component::Attn),
            prob_t1_before: 0.1,
            prob_t1_after: 0.4,
            prob_t2_before: 0.5,
            prob_t2_after: 0.45,
            delta_t1: 0.3,
            delta_t2: -0.05,
            steered: false,
            top1_before: 2,
            top1_after: 1,
        };
        let text = String::from_utf8(bins_csv(&[o], &paper_bins()).unwrap()).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 10);
        assert!(text.contains("cross_model,t1,2,attn,university,t1,5,+,1,1\n"));
        assert!(text.contains("cross_model,t1,2,attn,university,t2,1,-,1,1\n"));
    }
}
