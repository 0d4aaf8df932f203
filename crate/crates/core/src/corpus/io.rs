// SPDX-License-Identifier: MIT OR Apache-2.0

//! Line-delimited JSON persistence. Every file starts with a header line.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{AttributeType, Attributes, BiographyRecord, CorpusPair, PromptCase, Tokenizer, Variant};
use crate::error::{ProbeError, Result};
use crate::fsutil::write_atomic;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHeader {
    pub format_version: u32,
    pub seed: u64,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_persons: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_conflicted: Option<usize>,
}

impl FileHeader {
    pub fn new(kind: &str, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed,
            kind: kind.to_string(),
            n_persons: None,
            n_conflicted: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    person_id: usize,
    person_name: String,
    variant: Variant,
    conflict_attribute: Option<AttributeType>,
    text: String,
    attributes: Attributes,
}

fn format_err(path: &Path, reason: impl Into<String>) -> ProbeError {
    ProbeError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn to_jsonl<T: Serialize>(header: &FileHeader, items: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(FileHeader, Vec<T>)> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ProbeError::MissingArtifact(path.to_path_buf()),
        _ => e.into(),
    })?;
    let mut lines = BufReader::new(file).lines();
    let header: FileHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?).map_err(|e| format_err(path, format!("header: {e}")))?,
        None => return Err(format_err(path, "empty file")),
    };
    if header.format_version != FORMAT_VERSION {
        return Err(format_err(path, format!("format_version {}", header.format_version)));
    }
    let mut items = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", n + 2)))?);
    }
    Ok((header, items))
}

fn corpus_header(kind: &str, corpus: &CorpusPair) -> FileHeader {
    FileHeader {
        n_persons: Some(corpus.n_persons),
        n_conflicted: Some(corpus.n_conflicted),
        ..FileHeader::new(kind, corpus.seed)
    }
}

pub fn corpus_bytes(kind: &str, corpus: &CorpusPair, records: &[BiographyRecord]) -> Result<Vec<u8>> {
    to_jsonl(
        &corpus_header(kind, corpus),
        records.iter().map(|r| RecordLine {
            person_id: r.person_id,
            person_name: r.person_name.clone(),
            variant: r.variant,
            conflict_attribute: r.conflict_attribute,
            text: r.text(),
            attributes: r.attributes.clone(),
        }),
    )
}

pub fn read_records(path: &Path) -> Result<(FileHeader, Vec<BiographyRecord>)> {
    let (header, lines): (_, Vec<RecordLine>) = read_jsonl(path)?;
    let mut records = Vec::with_capacity(lines.len());
    for l in lines {
        let r = BiographyRecord {
            person_id: l.person_id,
            person_name: l.person_name,
            attributes: l.attributes,
            variant: l.variant,
            conflict_attribute: l.conflict_attribute,
        };
        if r.text() != l.text {
            return Err(format_err(path, format!("text of person {} does not match its attributes", r.person_id)));
        }
        records.push(r);
    }
    Ok((header, records))
}

/// Writes `mix.jsonl` and `clean.jsonl` under `dir`.
pub fn write_corpus(dir: &Path, corpus: &CorpusPair) -> Result<()> {
    write_atomic(&dir.join("mix.jsonl"), &corpus_bytes("mix", corpus, &corpus.mix)?)?;
    write_atomic(&dir.join("clean.jsonl"), &corpus_bytes("clean", corpus, &corpus.clean)?)?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<CorpusPair> {
    let mix_path = dir.join("mix.jsonl");
    let (mh, mix) = read_records(&mix_path)?;
    let (ch, clean) = read_records(&dir.join("clean.jsonl"))?;
    let (Some(n_persons), Some(n_conflicted)) = (mh.n_persons, mh.n_conflicted) else {
        return Err(format_err(&mix_path, "header lacks n_persons / n_conflicted"));
    };
    if (ch.n_persons, ch.n_conflicted, ch.seed) != (mh.n_persons, mh.n_conflicted, mh.seed)
        || clean.len() != n_persons
        || mix.len() != n_persons + n_conflicted
    {
        return Err(format_err(&mix_path, "mix and clean corpora disagree"));
    }
    Ok(CorpusPair {
        mix,
        clean,
        n_persons,
        n_conflicted,
        seed: mh.seed,
    })
}

/// Header line followed by the `{surface -> id}` object on one line.
pub fn tokenizer_bytes(tokenizer: &Tokenizer, seed: u64) -> Result<Vec<u8>> {
    to_jsonl(&FileHeader::new("tokenizer", seed), [tokenizer])
}

pub fn read_tokenizer(path: &Path) -> Result<Tokenizer> {
    let (_, mut items): (_, Vec<Tokenizer>) = read_jsonl(path)?;
    match (items.pop(), items.is_empty()) {
        (Some(t), true) => Ok(t),
        _ => Err(format_err(path, "expected exactly one vocabulary line")),
    }
}

pub fn prompts_bytes(cases: &[PromptCase], seed: u64) -> Result<Vec<u8>> {
    to_jsonl(&FileHeader::new("prompts", seed), cases)
}

pub fn read_prompts(path: &Path) -> Result<Vec<PromptCase>> {
    Ok(read_jsonl(path)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_entity_pools, generate_corpus, PoolCounts};

    #[test]
    fn corpus_round_trip() {
        let pools = build_entity_pools(7, &PoolCounts::default()).unwrap();
        let corpus = generate_corpus(&pools, 20, 8, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        assert_eq!(read_corpus(dir.path()).unwrap(), corpus);
        let first = std::fs::read_to_string(dir.path().join("mix.jsonl")).unwrap();
        let header: FileHeader = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        assert_eq!((header.format_version, header.seed), (FORMAT_VERSION, 4));
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_prompts(&dir.path().join("prompts.jsonl")),
            Err(ProbeError::MissingArtifact(_))
        ));
    }
}
