// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AttributeType, CorpusPair, PromptCase, TokenId, Tokenizer};
use crate::error::{ProbeError, Result};

/// Builds a case from the two tokenized biographies of one person.
pub fn prompt_case_from_tokens(
    person_id: usize,
    ground_truth: &[TokenId],
    contradiction: &[TokenId],
    attribute_type: AttributeType,
    attribute_value_t1: &str,
    attribute_value_t2: &str,
) -> Result<PromptCase> {
    let shared = ground_truth
        .iter()
        .zip(contradiction)
        .take_while(|(a, b)| a == b)
        .count();
    let (Some(&t1), Some(&t2)) = (ground_truth.get(shared), contradiction.get(shared)) else {
        return Err(ProbeError::NoDivergence { person_id });
    };
    Ok(PromptCase {
        person_id,
        prompt_tokens: ground_truth[..shared].to_vec(),
        t1,
        t2,
        divergence_index: shared + 1,
        attribute_type,
        attribute_value_t1: attribute_value_t1.to_string(),
        attribute_value_t2: attribute_value_t2.to_string(),
    })
}

/// One case per conflicted person, ordered by person id.
pub fn build_prompt_cases(corpus: &CorpusPair, tokenizer: &Tokenizer) -> Result<Vec<PromptCase>> {
    if corpus.n_conflicted == 0 {
        return Err(ProbeError::InvalidInput("corpus has no conflicted persons".into()));
    }
    let mut cases = Vec::with_capacity(corpus.n_conflicted);
    for person in 0..corpus.n_conflicted {
        let gt = corpus
            .ground_truth(person)
            .ok_or_else(|| ProbeError::InvalidInput(format!("person {person} has no ground truth")))?;
        let bad = corpus
            .contradiction(person)
            .ok_or_else(|| ProbeError::InvalidInput(format!("person {person} has no contradiction")))?;
        let attribute = bad
            .conflict_attribute
            .ok_or_else(|| ProbeError::InvalidInput(format!("contradiction of {person} lacks an attribute")))?;
        cases.push(prompt_case_from_tokens(
            person,
            &tokenizer.tokenize(&gt.text())?,
            &tokenizer.tokenize(&bad.text())?,
            attribute,
            gt.attributes.value(attribute),
            bad.attributes.value(attribute),
        )?);
    }
    Ok(cases)
}

/// How to choose among several clean donors for the same attribute value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DonorChoice {
    #[default]
    SmallestId,
    Seeded(u64),
}

/// A clean-subset prompt truncated right before an attribute value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourcePrompt {
    pub person_id: usize,
    pub prompt_tokens: Vec<TokenId>,
    /// The token realizing the value, i.e. the token the prompt leads into.
    pub source_token: TokenId,
    pub attribute_type: AttributeType,
    pub attribute_value: String,
}

fn value_hash(value: &str) -> u64 {
    // FNV-1a
    value
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Finds a clean-subset person other than `exclude_person` whose biography
/// carries `value`, and returns their biography cut right before it.
pub fn select_clean_source_prompt(
    corpus: &CorpusPair,
    tokenizer: &Tokenizer,
    attribute_type: AttributeType,
    value: &str,
    exclude_person: usize,
    choice: DonorChoice,
) -> Result<SourcePrompt> {
    let candidates: Vec<_> = corpus
        .clean_subset()
        .filter(|r| r.person_id != exclude_person && r.attributes.value(attribute_type) == value)
        .collect();
    let donor = match (choice, candidates.as_slice()) {
        (_, []) => {
            return Err(ProbeError::NoCleanDonor {
                value: value.to_string(),
            })
        }
        (DonorChoice::SmallestId, c) => c[0],
        (DonorChoice::Seeded(seed), c) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ value_hash(value));
            c[rng.gen_range(0..c.len())]
        }
    };
    let rendered = donor.rendered();
    let cut = match attribute_type {
        AttributeType::University => rendered.university_cut,
        AttributeType::Company => rendered.company_cut,
    };
    let prompt_tokens = tokenizer.tokenize(&rendered.text[..cut])?;
    let full = tokenizer.tokenize(&rendered.text)?;
    let source_token = *full
        .get(prompt_tokens.len())
        .ok_or_else(|| ProbeError::InvalidInput(format!("donor {} text ends at the cut", donor.person_id)))?;
    Ok(SourcePrompt {
        person_id: donor.person_id,
        prompt_tokens,
        source_token,
        attribute_type,
        attribute_value: value.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn immediate_divergence() {
        let c = prompt_case_from_tokens(0, &[5, 1, 2], &[6, 1, 2], AttributeType::Company, "a", "b").unwrap();
        assert!(c.prompt_tokens.is_empty());
        assert_eq!(c.divergence_index, 1);
        assert_eq!((c.t1, c.t2), (5, 6));
    }

    #[test]
    fn identical_sequences_never_diverge() {
        assert!(matches!(
            prompt_case_from_tokens(3, &[1, 2], &[1, 2], AttributeType::Company, "a", "a"),
            Err(ProbeError::NoDivergence { person_id: 3 })
        ));
    }

    #[test]
    fn fnv_is_stable() {
        assert_eq!(value_hash(""), 0xcbf2_9ce4_8422_2325);
    }
}
