// SPDX-License-Identifier: MIT OR Apache-2.0

//! Where injected activations come from. Strategies are looked up by name.

use super::{ensure_same_architecture, prompt_hash, ComponentRef, PatchMode, SourceActivation, SourceProvenance, SourceRole, TsSelection};
use crate::corpus::{select_clean_source_prompt, CorpusPair, DonorChoice, PromptCase, TokenId, Tokenizer};
use crate::error::{ProbeError, Result};
use crate::model::{forward_cached, ResidualCache, TransformerParams};

/// Everything a strategy may draw a source activation from.
pub struct SweepContext<'a> {
    pub mix: &'a TransformerParams,
    pub clean: Option<&'a TransformerParams>,
    pub corpus: &'a CorpusPair,
    pub tokenizer: &'a Tokenizer,
    pub donor_choice: DonorChoice,
}

/// A source prompt already run through its model, ready to hand out the
/// final-position output of any component.
pub struct PreparedSource {
    cache: ResidualCache,
    provenance: SourceProvenance,
}

impl PreparedSource {
    pub fn new(
        params: &TransformerParams,
        tokens: &[TokenId],
        mode: PatchMode,
        donor_person_id: usize,
        source_token: TokenId,
    ) -> Result<Self> {
        let Some(position) = tokens.len().checked_sub(1) else {
            return Err(ProbeError::PositionOutOfRange { position: 0, len: 0 });
        };
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        Ok(Self {
            cache: forward_cached(params, &ids)?,
            provenance: SourceProvenance {
                mode,
                donor_person_id,
                source_token,
                source_prompt_hash: prompt_hash(tokens),
                position,
            },
        })
    }

    pub fn capture(&self, component_ref: ComponentRef) -> Result<SourceActivation> {
        component_ref.check(self.cache.n_layers())?;
        let out = self.cache.component_out(component_ref.layer - 1, component_ref.component);
        Ok(SourceActivation {
            component_ref,
            vector: out.row(self.provenance.position).to_vec(),
            provenance: self.provenance.clone(),
        })
    }
}

pub trait PatchStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn mode(&self) -> PatchMode;

    /// The source roles this strategy evaluates for a requested selection.
    fn source_roles(&self, requested: TsSelection) -> Vec<SourceRole>;

    fn prepare(&self, ctx: &SweepContext<'_>, case: &PromptCase, role: SourceRole) -> Result<PreparedSource>;
}

/// A clean donor's prompt for the role's attribute value, run through the
/// mixed model itself.
pub struct SameModel;

impl PatchStrategy for SameModel {
    fn name(&self) -> &'static str {
        "same_model"
    }

    fn mode(&self) -> PatchMode {
        PatchMode::SameModel
    }

    fn source_roles(&self, requested: TsSelection) -> Vec<SourceRole> {
        requested.roles()
    }

    fn prepare(&self, ctx: &SweepContext<'_>, case: &PromptCase, role: SourceRole) -> Result<PreparedSource> {
        let donor = select_clean_source_prompt(
            ctx.corpus,
            ctx.tokenizer,
            case.attribute_type,
            role.value(case),
            case.person_id,
            ctx.donor_choice,
        )?;
        if donor.source_token != role.token(case) {
            return Err(ProbeError::InvalidInput(format!(
                "donor {} leads into token {}, case {} expects {}",
                donor.person_id,
                donor.source_token,
                case.person_id,
                role.token(case)
            )));
        }
        PreparedSource::new(ctx.mix, &donor.prompt_tokens, PatchMode::SameModel, donor.person_id, donor.source_token)
    }
}

/// The case's own prompt run through the clean model. Only `t1` is a valid
/// source, since the clean model never saw the contradiction.
pub struct CrossModel;

impl PatchStrategy for CrossModel {
    fn name(&self) -> &'static str {
        "cross_model"
    }

    fn mode(&self) -> PatchMode {
        PatchMode::CrossModel
    }

    fn source_roles(&self, _requested: TsSelection) -> Vec<SourceRole> {
        vec![SourceRole::T1]
    }

    fn prepare(&self, ctx: &SweepContext<'_>, case: &PromptCase, _role: SourceRole) -> Result<PreparedSource> {
        let clean = ctx
            .clean
            .ok_or_else(|| ProbeError::InvalidInput("cross-model patching needs the clean model".into()))?;
        ensure_same_architecture(ctx.mix, clean)?;
        PreparedSource::new(clean, &case.prompt_tokens, PatchMode::CrossModel, case.person_id, case.t1)
    }
}

pub fn strategy_names() -> &'static [&'static str] {
    &["same_model", "cross_model"]
}

/// Looks up a strategy; `patch` and `cmap` are accepted as aliases.
pub fn strategy(name: &str) -> Result<Box<dyn PatchStrategy>> {
    match name {
        "same_model" | "patch" => Ok(Box::new(SameModel)),
        "cross_model" | "cmap" => Ok(Box::new(CrossModel)),
        other => Err(ProbeError::InvalidConfig(format!(
            "unknown patch strategy {other:?}, expected one of {:?}",
            strategy_names()
        ))),
    }
}
