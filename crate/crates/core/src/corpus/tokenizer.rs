// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed-vocabulary word-level tokenizer.
//!
//! Text is cut into pieces of an optional single leading space followed by a
//! run of letters, a run of digits, or one other character. Ordinary words
//! are whole tokens. Synthetic entity words are split into a leading token of
//! [`HEAD_LEN`] letters (carrying the space) and a `##`-prefixed continuation,
//! which gives every entity a short, unique first token.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::pools::HEAD_LEN;
use crate::error::{ProbeError, Result};

/// Marks a piece that attaches to the previous one without a space.
pub const CONTINUATION: &str = "##";

/// Hard ceiling on vocabulary size.
pub const MAX_VOCAB: usize = 4096;

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, TokenId>", into = "BTreeMap<String, TokenId>")]
pub struct Tokenizer {
    vocab: BTreeMap<String, TokenId>,
    inverse: Vec<String>,
}

/// Splits text into whitespace-aware pieces. Concatenating the pieces gives
/// back the input.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        if bytes[i] == b' ' {
            i += 1;
            if i == bytes.len() || bytes[i] == b' ' {
                pieces.push(&text[start..i]);
                continue;
            }
        }
        let c = bytes[i];
        if c.is_ascii_alphabetic() {
            while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
                i += 1;
            }
        } else if c.is_ascii_digit() {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
        } else {
            // One full UTF-8 character.
            i += text[i..].chars().next().map_or(1, char::len_utf8);
        }
        pieces.push(&text[start..i]);
    }
    pieces
}

fn split_synthetic(piece: &str) -> Option<(&str, &str)> {
    let lead = usize::from(piece.starts_with(' '));
    let word = &piece[lead..];
    if word.len() > HEAD_LEN && word.bytes().all(|b| b.is_ascii_alphabetic()) {
        Some((&piece[..lead + HEAD_LEN], &piece[lead + HEAD_LEN..]))
    } else {
        None
    }
}

impl Tokenizer {
    /// Builds the vocabulary covering `texts`, splitting every occurrence of a
    /// word listed in `synthetic`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, synthetic: &[String]) -> Result<Self> {
        let synthetic: HashSet<&str> = synthetic.iter().map(String::as_str).collect();
        let mut pieces = BTreeSet::new();
        let add_word_forms = |piece: &str, pieces: &mut BTreeSet<String>| {
            pieces.insert(piece.to_string());
            // Unspaced twin, so entity strings tokenize on their own too.
            if let Some(bare) = piece.strip_prefix(' ') {
                if bare.bytes().all(|b| b.is_ascii_alphabetic()) {
                    pieces.insert(bare.to_string());
                }
            }
        };
        for text in texts {
            for piece in pre_tokenize(text) {
                let word = piece.trim_start_matches(' ');
                if synthetic.contains(word) {
                    let (head, tail) = split_synthetic(piece).ok_or_else(|| {
                        ProbeError::InvalidInput(format!("synthetic word {word:?} is too short to split"))
                    })?;
                    add_word_forms(head, &mut pieces);
                    pieces.insert(format!("{CONTINUATION}{tail}"));
                } else {
                    add_word_forms(piece, &mut pieces);
                }
            }
        }
        Self::from_pieces(pieces.into_iter().collect())
    }

    fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        if pieces.len() > MAX_VOCAB {
            return Err(ProbeError::InvalidInput(format!(
                "vocabulary of {} pieces exceeds {MAX_VOCAB}",
                pieces.len()
            )));
        }
        let vocab = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as TokenId))
            .collect();
        Ok(Self { vocab, inverse: pieces })
    }

    pub fn vocab_size(&self) -> usize {
        self.inverse.len()
    }

    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.vocab.get(piece).copied()
    }

    pub fn piece(&self, id: TokenId) -> Option<&str> {
        self.inverse.get(id as usize).map(String::as_str)
    }

    pub fn vocab(&self) -> &BTreeMap<String, TokenId> {
        &self.vocab
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for piece in pre_tokenize(text) {
            if let Some(id) = self.id(piece) {
                out.push(id);
                continue;
            }
            let split = split_synthetic(piece).and_then(|(head, tail)| {
                Some((self.id(head)?, self.id(&format!("{CONTINUATION}{tail}"))?))
            });
            match split {
                Some((h, t)) => out.extend([h, t]),
                None => return Err(ProbeError::UnknownToken(piece.to_string())),
            }
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let piece = self
                .piece(id)
                .ok_or_else(|| ProbeError::UnknownToken(format!("#{id}")))?;
            s.push_str(piece.strip_prefix(CONTINUATION).unwrap_or(piece));
        }
        Ok(s)
    }

    /// Display form of a token, e.g. `"Uk"` for the piece `" Uk"`.
    pub fn display(&self, id: TokenId) -> String {
        self.piece(id).map_or_else(|| format!("#{id}"), |p| p.trim_start().to_string())
    }
}

impl TryFrom<BTreeMap<String, TokenId>> for Tokenizer {
    type Error = ProbeError;

    fn try_from(map: BTreeMap<String, TokenId>) -> Result<Self> {
        let mut inverse = vec![None; map.len()];
        for (piece, &id) in &map {
            let slot = inverse
                .get_mut(id as usize)
                .ok_or_else(|| ProbeError::InvalidInput(format!("token id {id} out of range")))?;
            if slot.replace(piece.clone()).is_some() {
                return Err(ProbeError::InvalidInput(format!("duplicate token id {id}")));
            }
        }
        let inverse = inverse.into_iter().map(|p| p.expect("ids are dense")).collect();
        Ok(Self { vocab: map, inverse })
    }
}

impl From<Tokenizer> for BTreeMap<String, TokenId> {
    fn from(t: Tokenizer) -> Self {
        t.vocab
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tokenizer {
        Tokenizer::build(
            ["Niels Cavalli went to University of Ukopnwm, 1942."],
            &["Ukopnwm".to_string()],
        )
        .unwrap()
    }

    #[test]
    fn pre_tokenize_concatenates_back() {
        let s = "Niels Cavalli (born on January 19, 1942) is  here.";
        assert_eq!(pre_tokenize(s).concat(), s);
        assert_eq!(pre_tokenize("a (b"), vec!["a", " (", "b"]);
    }

    #[test]
    fn entity_tokenizes_with_its_head_first() {
        let t = sample();
        let ids = t.tokenize("University of Ukopnwm").unwrap();
        assert_eq!(
            ids,
            vec![
                t.id("University").unwrap(),
                t.id(" of").unwrap(),
                t.id(" Uk").unwrap(),
                t.id("##opnwm").unwrap()
            ]
        );
        assert_eq!(t.display(ids[2]), "Uk");
    }

    #[test]
    fn empty_text() {
        assert!(sample().tokenize("").unwrap().is_empty());
    }

    #[test]
    fn unknown_token() {
        assert!(matches!(sample().tokenize("Niels Zzz"), Err(ProbeError::UnknownToken(p)) if p == " Zzz"));
    }

    #[test]
    fn round_trip() {
        let t = sample();
        let s = "Niels Cavalli went to University of Ukopnwm, 1942.";
        assert_eq!(t.detokenize(&t.tokenize(s).unwrap()).unwrap(), s);
    }

    #[test]
    fn json_round_trip() {
        let t = sample();
        let back: Tokenizer = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
