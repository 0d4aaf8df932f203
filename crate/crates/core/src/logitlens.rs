// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit-lens projections of the residual stream and per-component
//! probability contributions for the competing tokens.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AttributeType, PromptCase, TokenId};
use crate::error::{ProbeError, Result};
use crate::model::{forward_cached, ResidualCache, TransformerParams};
use crate::nn::{kernels, Tensor};

pub const CONTROL_SET_SIZE: usize = 5;

/// Vocabulary distributions at one position for every residual site.
///
/// Stored as `2L + 1` vectors: index 0 is the stream entering layer 0 and
/// `2l + 1`, `2l + 2` follow the attention and MLP updates of layer `l`, so
/// `post(l)` and `pre(l + 1)` are the same vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDistributions {
    dists: Vec<Vec<f64>>,
}

impl LayerDistributions {
    pub fn n_layers(&self) -> usize {
        (self.dists.len() - 1) / 2
    }

    pub fn vocab_size(&self) -> usize {
        self.dists[0].len()
    }

    pub fn pre(&self, layer: usize) -> &[f64] {
        &self.dists[2 * layer]
    }

    pub fn mid(&self, layer: usize) -> &[f64] {
        &self.dists[2 * layer + 1]
    }

    pub fn post(&self, layer: usize) -> &[f64] {
        &self.dists[2 * layer + 2]
    }

    /// The last layer's output distribution.
    pub fn final_dist(&self) -> &[f64] {
        self.dists.last().expect("at least one site")
    }

    pub fn all(&self) -> &[Vec<f64>] {
        &self.dists
    }
}

/// Projects every residual site at `position` through the unembedding,
/// with the final layer norm applied first when `final_ln` is set.
pub fn project_layers(
    cache: &ResidualCache,
    params: &TransformerParams,
    position: usize,
    final_ln: bool,
) -> Result<LayerDistributions> {
    let len = cache.seq_len();
    if position >= len {
        return Err(ProbeError::PositionOutOfRange { position, len });
    }
    let n_layers = cache.n_layers();
    let d = params.config.d_model;
    let mut rows = Vec::with_capacity((2 * n_layers + 1) * d);
    rows.extend_from_slice(cache.x_pre(0).row(position));
    for l in 0..n_layers {
        rows.extend_from_slice(cache.x_mid(l).row(position));
        rows.extend_from_slice(cache.x_post(l).row(position));
    }
    let stacked = Tensor::matrix(2 * n_layers + 1, d, rows)?;
    let probs = kernels::softmax_rows(&params.unembed_rows(&stacked, final_ln)?);
    Ok(LayerDistributions {
        dists: (0..probs.rows()).map(|r| probs.row(r).to_vec()).collect(),
    })
}

/// Per-layer probability deltas of the attention and MLP updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerContributions {
    pub attn: Vec<f64>,
    pub mlp: Vec<f64>,
}

pub fn token_contributions(dists: &LayerDistributions, token: usize) -> Result<LayerContributions> {
    if token >= dists.vocab_size() {
        return Err(ProbeError::InvalidInput(format!(
            "token {token} outside vocabulary of {}",
            dists.vocab_size()
        )));
    }
    let n = dists.n_layers();
    Ok(LayerContributions {
        attn: (0..n).map(|l| dists.mid(l)[token] - dists.pre(l)[token]).collect(),
        mlp: (0..n).map(|l| dists.post(l)[token] - dists.mid(l)[token]).collect(),
    })
}

/// The five most probable tokens of `final_dist` other than `t1` and `t2`;
/// equal probabilities are ordered by ascending id.
pub fn control_set(final_dist: &[f64], t1: usize, t2: usize) -> Result<Vec<usize>> {
    if final_dist.len() < CONTROL_SET_SIZE + 2 {
        return Err(ProbeError::InvalidInput(format!(
            "control set needs a vocabulary of at least {}, got {}",
            CONTROL_SET_SIZE + 2,
            final_dist.len()
        )));
    }
    let mut ids: Vec<usize> = (0..final_dist.len()).filter(|&i| i != t1 && i != t2).collect();
    ids.sort_by(|&a, &b| final_dist[b].total_cmp(&final_dist[a]).then(a.cmp(&b)));
    ids.truncate(CONTROL_SET_SIZE);
    Ok(ids)
}

/// Mean contributions over `control`, per layer and sub-block.
pub fn control_contributions(dists: &LayerDistributions, control: &[usize]) -> Result<LayerContributions> {
    if control.is_empty() {
        return Err(ProbeError::InvalidInput("empty control set".into()));
    }
    let n = dists.n_layers();
    let mut sum = LayerContributions {
        attn: vec![0.0; n],
        mlp: vec![0.0; n],
    };
    for &t in control {
        let c = token_contributions(dists, t)?;
        for l in 0..n {
            sum.attn[l] += c.attn[l];
            sum.mlp[l] += c.mlp[l];
        }
    }
    let k = control.len() as f64;
    sum.attn.iter_mut().chain(sum.mlp.iter_mut()).for_each(|v| *v /= k);
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    T1,
    T2,
    Control,
}

impl TokenRole {
    pub const ALL: [TokenRole; 3] = [TokenRole::T1, TokenRole::T2, TokenRole::Control];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::T1 => "t1",
            Self::T2 => "t2",
            Self::Control => "control",
        }
    }
}

impl fmt::Display for TokenRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionRecord {
    pub person_id: usize,
    pub attribute_type: AttributeType,
    pub token_role: TokenRole,
    /// The attribute value realized by this role's token: the ground-truth
    /// value for `t1` and the control set, the contradictory one for `t2`.
    pub attribute_value: String,
    pub contributions: LayerContributions,
    /// Populated for the control role only.
    pub control_tokens: Vec<TokenId>,
}

/// The three contribution records of one prompt case at its final position.
pub fn case_contributions(params: &TransformerParams, case: &PromptCase, final_ln: bool) -> Result<Vec<ContributionRecord>> {
    let tokens: Vec<usize> = case.prompt_tokens.iter().map(|&t| t as usize).collect();
    if tokens.is_empty() {
        return Err(ProbeError::PositionOutOfRange { position: 0, len: 0 });
    }
    let cache = forward_cached(params, &tokens)?;
    let dists = project_layers(&cache, params, tokens.len() - 1, final_ln)?;
    let (t1, t2) = (case.t1 as usize, case.t2 as usize);
    let control = control_set(dists.final_dist(), t1, t2)?;
    let record = |role, value: &str, contributions, control_tokens| ContributionRecord {
        person_id: case.person_id,
        attribute_type: case.attribute_type,
        token_role: role,
        attribute_value: value.to_string(),
        contributions,
        control_tokens,
    };
    Ok(vec![
        record(TokenRole::T1, &case.attribute_value_t1, token_contributions(&dists, t1)?, vec![]),
        record(TokenRole::T2, &case.attribute_value_t2, token_contributions(&dists, t2)?, vec![]),
        record(
            TokenRole::Control,
            &case.attribute_value_t1,
            control_contributions(&dists, &control)?,
            control.iter().map(|&t| t as TokenId).collect(),
        ),
    ])
}

/// Records for every case, in case order.
pub fn population_contributions(
    params: &TransformerParams,
    cases: &[PromptCase],
    final_ln: bool,
) -> Result<Vec<ContributionRecord>> {
    let per_case: Vec<Vec<ContributionRecord>> = cases
        .par_iter()
        .map(|c| case_contributions(params, c, final_ln))
        .collect::<Result<_>>()?;
    Ok(per_case.into_iter().flatten().collect())
}

/// How records are grouped before averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strata {
    All,
    AttributeType,
    AttributeValue,
}

impl FromStr for Strata {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Self::All),
            "attribute_type" => Ok(Self::AttributeType),
            "attribute_value" => Ok(Self::AttributeValue),
            other => Err(format!("unknown strata {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateContribution {
    /// `all`, `attribute_type=<type>` or `attribute_value=<value>`.
    pub stratum: String,
    pub token_role: TokenRole,
    pub n: usize,
    pub mean: LayerContributions,
}

/// A (stratum, role) pair with no records; it is skipped, not averaged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmptyStratum {
    pub stratum: String,
    pub token_role: TokenRole,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Aggregation {
    pub rows: Vec<AggregateContribution>,
    pub empty: Vec<EmptyStratum>,
}

fn stratum_key(r: &ContributionRecord, strata: Strata) -> String {
    match strata {
        Strata::All => "all".to_string(),
        Strata::AttributeType => format!("attribute_type={}", r.attribute_type),
        Strata::AttributeValue => format!("attribute_value={}", r.attribute_value),
    }
}

/// Per-layer means per (stratum, role). Records are summed in input order.
/// The `all` stratum and both attribute types are always expected, so a
/// missing one is reported in [`Aggregation::empty`].
pub fn aggregate_population(records: &[ContributionRecord], strata: Strata) -> Aggregation {
    let mut groups: BTreeMap<(String, TokenRole), Vec<&ContributionRecord>> = BTreeMap::new();
    let expected: Vec<String> = match strata {
        Strata::All => vec!["all".to_string()],
        Strata::AttributeType => AttributeType::ALL.iter().map(|a| format!("attribute_type={a}")).collect(),
        Strata::AttributeValue => vec![],
    };
    for key in &expected {
        for role in TokenRole::ALL {
            groups.entry((key.clone(), role)).or_default();
        }
    }
    for r in records {
        groups.entry((stratum_key(r, strata), r.token_role)).or_default().push(r);
    }
    let mut out = Aggregation::default();
    for ((stratum, token_role), members) in groups {
        let Some(first) = members.first() else {
            log::warn!("stratum {stratum} has no {token_role} records");
            out.empty.push(EmptyStratum { stratum, token_role });
            continue;
        };
        let n_layers = first.contributions.attn.len();
        let mut mean = LayerContributions {
            attn: vec![0.0; n_layers],
            mlp: vec![0.0; n_layers],
        };
        for m in &members {
            for l in 0..n_layers {
                mean.attn[l] += m.contributions.attn[l];
                mean.mlp[l] += m.contributions.mlp[l];
            }
        }
        let n = members.len();
        mean.attn.iter_mut().chain(mean.mlp.iter_mut()).for_each(|v| *v /= n as f64);
        out.rows.push(AggregateContribution {
            stratum,
            token_role,
            n,
            mean,
        });
    }
    out
}

/// One row per (record, layer); layers are 1-based.
pub fn contributions_csv(records: &[ContributionRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "person_id",
        "attribute_type",
        "token_role",
        "layer",
        "contrib_attn",
        "contrib_mlp",
        "attribute_value",
        "control_tokens",
    ])?;
    for r in records {
        let control = r.control_tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        for (l, (a, m)) in r.contributions.attn.iter().zip(&r.contributions.mlp).enumerate() {
            w.write_record([
                r.person_id.to_string(),
                r.attribute_type.to_string(),
                r.token_role.to_string(),
                (l + 1).to_string(),
                a.to_string(),
                m.to_string(),
                r.attribute_value.clone(),
                control.clone(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| ProbeError::InvalidInput(e.to_string()))
}

pub fn aggregate_csv(rows: &[AggregateContribution]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["stratum", "token_role", "layer", "mean_contrib_attn", "mean_contrib_mlp", "n"])?;
    for r in rows {
        for (l, (a, m)) in r.mean.attn.iter().zip(&r.mean.mlp).enumerate() {
            w.write_record([
                r.stratum.clone(),
                r.token_role.to_string(),
                (l + 1).to_string(),
                a.to_string(),
                m.to_string(),
                r.n.to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| ProbeError::InvalidInput(e.to_string()))
}
