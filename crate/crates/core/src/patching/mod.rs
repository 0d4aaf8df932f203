// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation patching at the final prompt position, within the mixed model
//! and across from the clean model.

mod strategy;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use strategy::{strategy, strategy_names, CrossModel, PatchStrategy, PreparedSource, SameModel, SweepContext};

use crate::analysis::steering_success;
use crate::corpus::{AttributeType, PromptCase, SourcePrompt, TokenId};
use crate::error::{ProbeError, Result};
use crate::fsutil::sha256_hex;
use crate::model::{forward_with_hook, Component, ForwardHook, TransformerParams};
use crate::nn::{kernels, Tensor};

/// A sub-block of the model; `layer` counts from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ComponentRef {
    pub layer: usize,
    pub component: Component,
}

impl ComponentRef {
    pub fn new(layer: usize, component: Component) -> Self {
        Self { layer, component }
    }

    pub fn check(&self, n_layers: usize) -> Result<()> {
        if self.layer == 0 || self.layer > n_layers {
            return Err(ProbeError::InvalidInput(format!(
                "layer {} outside 1..={n_layers}",
                self.layer
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ComponentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.component, self.layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    SameModel,
    CrossModel,
}

impl PatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SameModel => "same_model",
            Self::CrossModel => "cross_model",
        }
    }
}

impl fmt::Display for PatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which competing token the injected activation is meant to promote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceRole {
    T1,
    T2,
}

impl SourceRole {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::T1 => "t1",
            Self::T2 => "t2",
        }
    }

    pub fn token(self, case: &PromptCase) -> TokenId {
        match self {
            Self::T1 => case.t1,
            Self::T2 => case.t2,
        }
    }

    pub fn value(self, case: &PromptCase) -> &str {
        match self {
            Self::T1 => &case.attribute_value_t1,
            Self::T2 => &case.attribute_value_t2,
        }
    }
}

impl fmt::Display for SourceRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Requested source roles for a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TsSelection {
    #[default]
    T1,
    T2,
    Both,
}

impl TsSelection {
    pub fn roles(self) -> Vec<SourceRole> {
        match self {
            Self::T1 => vec![SourceRole::T1],
            Self::T2 => vec![SourceRole::T2],
            Self::Both => vec![SourceRole::T1, SourceRole::T2],
        }
    }
}

impl FromStr for TsSelection {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "t1" => Ok(Self::T1),
            "t2" => Ok(Self::T2),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown t_s selection {other:?}")),
        }
    }
}

/// Which sub-blocks a sweep visits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentFilter {
    #[default]
    Attn,
    Mlp,
    Both,
}

impl ComponentFilter {
    pub fn components(self) -> Vec<Component> {
        match self {
            Self::Attn => vec![Component::Attn],
            Self::Mlp => vec![Component::Mlp],
            Self::Both => vec![Component::Attn, Component::Mlp],
        }
    }
}

impl FromStr for ComponentFilter {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "attn" => Ok(Self::Attn),
            "mlp" => Ok(Self::Mlp),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown component filter {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceProvenance {
    pub mode: PatchMode,
    pub donor_person_id: usize,
    pub source_token: TokenId,
    /// SHA-256 of the source prompt's token ids.
    pub source_prompt_hash: String,
    /// Final index of the source prompt.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceActivation {
    pub component_ref: ComponentRef,
    pub vector: Vec<f64>,
    pub provenance: SourceProvenance,
}

/// Hash of a token sequence as little-endian u32s.
pub fn prompt_hash(tokens: &[TokenId]) -> String {
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

fn to_usize(tokens: &[TokenId]) -> Vec<usize> {
    tokens.iter().map(|&t| t as usize).collect()
}

struct CaptureHook {
    layer: usize,
    component: Component,
    position: usize,
    captured: Option<Vec<f64>>,
}

impl ForwardHook for CaptureHook {
    fn component(&mut self, layer: usize, component: Component, out: &mut Tensor) -> Result<()> {
        if layer == self.layer && component == self.component {
            self.captured = Some(out.row(self.position).to_vec());
        }
        Ok(())
    }
}

/// The component's output at the final position of `prompt_tokens`.
pub fn capture_activation(
    params: &TransformerParams,
    prompt_tokens: &[TokenId],
    component_ref: ComponentRef,
    mode: PatchMode,
    donor_person_id: usize,
    source_token: TokenId,
) -> Result<SourceActivation> {
    component_ref.check(params.config.n_layers)?;
    let Some(position) = prompt_tokens.len().checked_sub(1) else {
        return Err(ProbeError::PositionOutOfRange { position: 0, len: 0 });
    };
    let mut hook = CaptureHook {
        layer: component_ref.layer - 1,
        component: component_ref.component,
        position,
        captured: None,
    };
    forward_with_hook(params, &to_usize(prompt_tokens), &mut hook)?;
    let vector = hook.captured.expect("every layer runs both components");
    Ok(SourceActivation {
        component_ref,
        vector,
        provenance: SourceProvenance {
            mode,
            donor_person_id,
            source_token,
            source_prompt_hash: prompt_hash(prompt_tokens),
            position,
        },
    })
}

struct InjectHook<'a> {
    layer: usize,
    component: Component,
    position: usize,
    vector: &'a [f64],
}

impl ForwardHook for InjectHook<'_> {
    fn component(&mut self, layer: usize, component: Component, out: &mut Tensor) -> Result<()> {
        if layer == self.layer && component == self.component {
            out.row_mut(self.position).copy_from_slice(self.vector);
        }
        Ok(())
    }
}

/// Logits of a run and the next-token distribution at its final position.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub logits: Tensor,
    pub final_probs: Vec<f64>,
}

fn final_run(logits: Tensor) -> Run {
    let final_probs = kernels::softmax_vec(logits.row(logits.rows() - 1));
    Run { logits, final_probs }
}

pub fn clean_run(params: &TransformerParams, prompt_tokens: &[TokenId]) -> Result<Run> {
    if prompt_tokens.is_empty() {
        return Err(ProbeError::PositionOutOfRange { position: 0, len: 0 });
    }
    Ok(final_run(crate::model::forward(params, &to_usize(prompt_tokens))?))
}

/// Forward pass with `injected.vector` replacing the designated component's
/// output at the final prompt position, before the residual addition.
pub fn patched_forward(params: &TransformerParams, prompt_tokens: &[TokenId], injected: &SourceActivation) -> Result<Run> {
    let d = params.config.d_model;
    if injected.vector.len() != d {
        return Err(ProbeError::DimMismatch {
            got: injected.vector.len(),
            expected: d,
        });
    }
    injected.component_ref.check(params.config.n_layers)?;
    let Some(position) = prompt_tokens.len().checked_sub(1) else {
        return Err(ProbeError::PositionOutOfRange { position: 0, len: 0 });
    };
    let mut hook = InjectHook {
        layer: injected.component_ref.layer - 1,
        component: injected.component_ref.component,
        position,
        vector: &injected.vector,
    };
    Ok(final_run(forward_with_hook(params, &to_usize(prompt_tokens), &mut hook)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchOutcome {
    pub person_id: usize,
    pub attribute_type: AttributeType,
    pub mode: PatchMode,
    pub source_role: SourceRole,
    pub source_token: TokenId,
    pub donor_person_id: usize,
    pub component_ref: ComponentRef,
    pub prob_t1_before: f64,
    pub prob_t1_after: f64,
    pub prob_t2_before: f64,
    pub prob_t2_after: f64,
    pub delta_t1: f64,
    pub delta_t2: f64,
    pub steered: bool,
    pub top1_before: TokenId,
    pub top1_after: TokenId,
}

impl PatchOutcome {
    /// The shift of the role's own token.
    pub fn delta(&self, role: SourceRole) -> f64 {
        match role {
            SourceRole::T1 => self.delta_t1,
            SourceRole::T2 => self.delta_t2,
        }
    }

    fn sort_key(&self) -> (usize, usize, Component, SourceRole) {
        (self.person_id, self.component_ref.layer, self.component_ref.component, self.source_role)
    }
}

/// Assembles an outcome from an unpatched and a patched run of one case.
pub fn outcome_from_runs(
    case: &PromptCase,
    source: &SourceActivation,
    role: SourceRole,
    before: &[f64],
    after: &[f64],
) -> PatchOutcome {
    let (t1, t2) = (case.t1 as usize, case.t2 as usize);
    PatchOutcome {
        person_id: case.person_id,
        attribute_type: case.attribute_type,
        mode: source.provenance.mode,
        source_role: role,
        source_token: source.provenance.source_token,
        donor_person_id: source.provenance.donor_person_id,
        component_ref: source.component_ref,
        prob_t1_before: before[t1],
        prob_t1_after: after[t1],
        prob_t2_before: before[t2],
        prob_t2_after: after[t2],
        delta_t1: after[t1] - before[t1],
        delta_t2: after[t2] - before[t2],
        steered: steering_success(before, after, source.provenance.source_token as usize),
        top1_before: kernels::argmax(before) as TokenId,
        top1_after: kernels::argmax(after) as TokenId,
    }
}

/// Patches a clean donor's activation into `mix` on the case's own prompt.
pub fn causal_effect_same_model(
    mix: &TransformerParams,
    case: &PromptCase,
    component_ref: ComponentRef,
    role: SourceRole,
    donor: &SourcePrompt,
) -> Result<PatchOutcome> {
    if donor.attribute_value != role.value(case) || donor.source_token != role.token(case) {
        return Err(ProbeError::InvalidInput(format!(
            "donor of person {} carries {:?}, case {} needs {:?}",
            donor.person_id,
            donor.attribute_value,
            case.person_id,
            role.value(case)
        )));
    }
    let source = capture_activation(
        mix,
        &donor.prompt_tokens,
        component_ref,
        PatchMode::SameModel,
        donor.person_id,
        donor.source_token,
    )?;
    let before = clean_run(mix, &case.prompt_tokens)?;
    let after = patched_forward(mix, &case.prompt_tokens, &source)?;
    Ok(outcome_from_runs(case, &source, role, &before.final_probs, &after.final_probs))
}

pub fn ensure_same_architecture(a: &TransformerParams, b: &TransformerParams) -> Result<()> {
    // The init seed is provenance, not shape.
    let shape = |p: &TransformerParams| crate::model::ModelConfig { seed: 0, ..p.config };
    if shape(a) != shape(b) {
        return Err(ProbeError::ConfigMismatch(format!("{:?} vs {:?}", a.config, b.config)));
    }
    Ok(())
}

/// Patches the clean model's activation on the same prompt into `mix`.
pub fn cmap_effect(
    mix: &TransformerParams,
    clean: &TransformerParams,
    case: &PromptCase,
    component_ref: ComponentRef,
) -> Result<PatchOutcome> {
    ensure_same_architecture(mix, clean)?;
    let source = capture_activation(
        clean,
        &case.prompt_tokens,
        component_ref,
        PatchMode::CrossModel,
        case.person_id,
        case.t1,
    )?;
    let before = clean_run(mix, &case.prompt_tokens)?;
    let after = patched_forward(mix, &case.prompt_tokens, &source)?;
    Ok(outcome_from_runs(case, &source, SourceRole::T1, &before.final_probs, &after.final_probs))
}

/// Parameters of a sweep besides the models and cases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepSpec {
    pub components: ComponentFilter,
    /// Inclusive 1-based layer range.
    pub layers: (usize, usize),
    pub ts: TsSelection,
}

impl SweepSpec {
    pub fn all_layers(n_layers: usize) -> Self {
        Self {
            components: ComponentFilter::default(),
            layers: (1, n_layers),
            ts: TsSelection::default(),
        }
    }

    fn refs(&self, n_layers: usize) -> Result<Vec<ComponentRef>> {
        let (a, b) = self.layers;
        if a == 0 || a > b || b > n_layers {
            return Err(ProbeError::InvalidInput(format!("layer range {a}..{b} outside 1..={n_layers}")));
        }
        Ok((a..=b)
            .flat_map(|l| self.components.components().into_iter().map(move |c| ComponentRef::new(l, c)))
            .collect())
    }
}

/// Every (case, layer, component, role) combination the strategy supports,
/// ordered by (person_id, layer, component, role).
pub fn sweep(
    strategy: &dyn PatchStrategy,
    ctx: &SweepContext<'_>,
    cases: &[PromptCase],
    spec: &SweepSpec,
) -> Result<Vec<PatchOutcome>> {
    if cases.is_empty() {
        return Err(ProbeError::InvalidInput("sweep over no cases".into()));
    }
    let refs = spec.refs(ctx.mix.config.n_layers)?;
    let roles = strategy.source_roles(spec.ts);
    let per_case: Vec<Vec<PatchOutcome>> = cases
        .par_iter()
        .map(|case| {
            let before = clean_run(ctx.mix, &case.prompt_tokens)?;
            let mut out = Vec::with_capacity(refs.len() * roles.len());
            for &role in &roles {
                let source = strategy.prepare(ctx, case, role)?;
                for &r in &refs {
                    let activation = source.capture(r)?;
                    let after = patched_forward(ctx.mix, &case.prompt_tokens, &activation)?;
                    out.push(outcome_from_runs(case, &activation, role, &before.final_probs, &after.final_probs));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut all: Vec<PatchOutcome> = per_case.into_iter().flatten().collect();
    all.sort_by_key(PatchOutcome::sort_key);
    Ok(all)
}

pub fn outcomes_csv(outcomes: &[PatchOutcome]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "person_id",
        "attribute_type",
        "mode",
        "t_s",
        "layer",
        "component",
        "prob_t1_before",
        "prob_t1_after",
        "prob_t2_before",
        "prob_t2_after",
        "delta_t1",
        "delta_t2",
        "steered",
        "source_token",
        "donor_person_id",
        "top1_before",
        "top1_after",
    ])?;
    for o in outcomes {
        w.write_record([
            o.person_id.to_string(),
            o.attribute_type.to_string(),
            o.mode.to_string(),
            o.source_role.to_string(),
            o.component_ref.layer.to_string(),
            o.component_ref.component.to_string(),
            o.prob_t1_before.to_string(),
            o.prob_t1_after.to_string(),
            o.prob_t2_before.to_string(),
            o.prob_t2_after.to_string(),
            o.delta_t1.to_string(),
            o.delta_t2.to_string(),
            o.steered.to_string(),
            o.source_token.to_string(),
            o.donor_person_id.to_string(),
            o.top1_before.to_string(),
            o.top1_after.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| ProbeError::InvalidInput(e.to_string()))
}

/// Parses a file written by [`outcomes_csv`].
pub fn read_outcomes_csv(bytes: &[u8]) -> Result<Vec<PatchOutcome>> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let bad = |what: &str| ProbeError::InvalidInput(format!("outcomes row {:?}: bad {what}", rec.position()));
        let num = |i: usize, what: &str| f(i).parse::<f64>().map_err(|_| bad(what));
        let int = |i: usize, what: &str| f(i).parse::<usize>().map_err(|_| bad(what));
        out.push(PatchOutcome {
            person_id: int(0, "person_id")?,
            attribute_type: f(1).parse().map_err(|_| bad("attribute_type"))?,
            mode: match f(2) {
                "same_model" => PatchMode::SameModel,
                "cross_model" => PatchMode::CrossModel,
                _ => return Err(bad("mode")),
            },
            source_role: match f(3) {
                "t1" => SourceRole::T1,
                "t2" => SourceRole::T2,
                _ => return Err(bad("t_s")),
            },
            component_ref: ComponentRef::new(int(4, "layer")?, f(5).parse().map_err(|_| bad("component"))?),
            prob_t1_before: num(6, "prob_t1_before")?,
            prob_t1_after: num(7, "prob_t1_after")?,
            prob_t2_before: num(8, "prob_t2_before")?,
            prob_t2_after: num(9, "prob_t2_after")?,
            delta_t1: num(10, "delta_t1")?,
            delta_t2: num(11, "delta_t2")?,
            steered: f(12).parse().map_err(|_| bad("steered"))?,
            source_token: int(13, "source_token")? as TokenId,
            donor_person_id: int(14, "donor_person_id")?,
            top1_before: int(15, "top1_before")? as TokenId,
            top1_after: int(16, "top1_after")? as TokenId,
        });
    }
    Ok(out)
}
