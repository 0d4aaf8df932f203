// SPDX-License-Identifier: MIT OR Apache-2.0

//! Paired conflicting biographies, their clean counterpart, the tokenizer and
//! the shared-prefix prompt cases.

mod generate;
pub mod io;
pub mod pools;
mod prompts;
pub mod template;
mod tokenizer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use generate::generate_corpus;
pub use pools::{build_entity_pools, EntityPools, PoolCounts};
pub use prompts::{build_prompt_cases, prompt_case_from_tokens, select_clean_source_prompt, DonorChoice, SourcePrompt};
pub use tokenizer::{pre_tokenize, TokenId, Tokenizer};

/// The attribute groups in which conflicts are planted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeType {
    University,
    Company,
}

impl AttributeType {
    pub const ALL: [AttributeType; 2] = [AttributeType::University, AttributeType::Company];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::University => "university",
            Self::Company => "company",
        }
    }
}

impl fmt::Display for AttributeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttributeType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "university" => Ok(Self::University),
            "company" => Ok(Self::Company),
            other => Err(format!("unknown attribute type {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    GroundTruth,
    Contradiction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attributes {
    pub birth_date: String,
    pub birth_place: String,
    pub university: String,
    pub major: String,
    pub company: String,
    pub work_place: String,
}

impl Attributes {
    pub fn value(&self, attribute: AttributeType) -> &str {
        match attribute {
            AttributeType::University => &self.university,
            AttributeType::Company => &self.company,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiographyRecord {
    pub person_id: usize,
    pub person_name: String,
    pub attributes: Attributes,
    pub variant: Variant,
    /// Set on contradiction records only.
    pub conflict_attribute: Option<AttributeType>,
}

impl BiographyRecord {
    pub fn rendered(&self) -> template::Rendered {
        template::render(&self.person_name, &self.attributes)
    }

    pub fn text(&self) -> String {
        self.rendered().text
    }
}

/// The mixed (conflicting) corpus and its clean counterpart.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusPair {
    /// Every ground-truth biography, followed by the contradictions of the
    /// first `n_conflicted` persons.
    pub mix: Vec<BiographyRecord>,
    /// Exactly one ground-truth biography per person.
    pub clean: Vec<BiographyRecord>,
    pub n_persons: usize,
    pub n_conflicted: usize,
    pub seed: u64,
}

impl CorpusPair {
    pub fn n_clean_subset(&self) -> usize {
        self.n_persons - self.n_conflicted
    }

    pub fn is_conflicted(&self, person_id: usize) -> bool {
        person_id < self.n_conflicted
    }

    pub fn ground_truth(&self, person_id: usize) -> Option<&BiographyRecord> {
        self.clean.get(person_id)
    }

    pub fn contradiction(&self, person_id: usize) -> Option<&BiographyRecord> {
        self.mix
            .iter()
            .skip(self.n_persons)
            .find(|r| r.person_id == person_id)
    }

    /// Ground-truth biographies of the non-conflicted subset.
    pub fn clean_subset(&self) -> impl Iterator<Item = &BiographyRecord> {
        self.clean.iter().skip(self.n_conflicted)
    }
}

/// One conflicted person's shared-prefix prompt and the two competing
/// continuations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptCase {
    pub person_id: usize,
    pub prompt_tokens: Vec<TokenId>,
    /// First token of the ground-truth continuation.
    pub t1: TokenId,
    /// First token of the contradictory continuation.
    pub t2: TokenId,
    /// 1-based index of the first differing token.
    pub divergence_index: usize,
    pub attribute_type: AttributeType,
    pub attribute_value_t1: String,
    pub attribute_value_t2: String,
}
