// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoints: magic, version, config JSON, provenance JSON, named
//! tensors, then a SHA-256 of everything before it.

use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, TrainHyper, TransformerParams};
use crate::error::{ProbeError, Result};
use crate::fsutil::write_atomic;
use crate::nn::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CPRBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where a set of weights came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// `base`, `mix` or `clean`.
    pub phase: String,
    /// SHA-256 of the training corpus file.
    pub corpus_hash: String,
    pub hyper: TrainHyper,
    /// SHA-256 of the checkpoint this run continued from, if any.
    pub parent: Option<String>,
    pub epoch_losses: Vec<f64>,
}

fn corrupt(reason: impl Into<String>) -> ProbeError {
    ProbeError::CorruptCheckpoint(reason.into())
}

fn push_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

pub fn checkpoint_bytes(params: &TransformerParams, provenance: &Provenance) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(params.n_params() * 8 + 4096);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_block(&mut out, &serde_json::to_vec(&params.config)?);
    push_block(&mut out, &serde_json::to_vec(provenance)?);
    let named = params.named_tensors();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        t.write_to(&mut out)?;
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save_checkpoint(params: &TransformerParams, provenance: &Provenance, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(params, provenance)?)
}

fn read_exact<const N: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| corrupt("truncated"))?;
    Ok(buf)
}

fn read_block<'a>(r: &mut Cursor<&'a [u8]>) -> Result<&'a [u8]> {
    let len = u64::from_le_bytes(read_exact(r)?) as usize;
    let start = r.position() as usize;
    let all = *r.get_ref();
    if all.len() - start < len {
        return Err(corrupt("truncated"));
    }
    r.set_position((start + len) as u64);
    Ok(&all[start..start + len])
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(TransformerParams, Provenance)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 32 {
        return Err(corrupt("truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("content hash mismatch"));
    }
    let mut r = Cursor::new(body);
    r.set_position(8);
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let config: ModelConfig =
        serde_json::from_slice(read_block(&mut r)?).map_err(|e| corrupt(format!("config: {e}")))?;
    let provenance: Provenance =
        serde_json::from_slice(read_block(&mut r)?).map_err(|e| corrupt(format!("provenance: {e}")))?;
    let n = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let expected: Vec<String> = TransformerParams::init_names(&config)?;
    if n != expected.len() {
        return Err(corrupt(format!("{n} tensors, expected {}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(n);
    for want in &expected {
        let len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
        let start = r.position() as usize;
        let name = body.get(start..start + len).ok_or_else(|| corrupt("truncated"))?;
        if name != want.as_bytes() {
            return Err(corrupt(format!("tensor {:?}, expected {want:?}", String::from_utf8_lossy(name))));
        }
        r.set_position((start + len) as u64);
        tensors.push(Tensor::read_from(&mut r).map_err(|e| corrupt(format!("tensor {want}: {e}")))?);
    }
    if r.position() as usize != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((TransformerParams::from_tensors(config, tensors)?, provenance))
}

pub fn load_checkpoint(path: &Path) -> Result<(TransformerParams, Provenance)> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ProbeError::MissingArtifact(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    parse_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (TransformerParams, Provenance) {
        let p = TransformerParams::init(ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 9,
            max_seq_len: 6,
            seed: 4,
        })
        .unwrap();
        let prov = Provenance {
            phase: "base".into(),
            corpus_hash: "00".into(),
            hyper: TrainHyper::default(),
            parent: None,
            epoch_losses: vec![2.5, 1.25],
        };
        (p, prov)
    }

    #[test]
    fn round_trip_is_exact() {
        let (p, prov) = sample();
        let bytes = checkpoint_bytes(&p, &prov).unwrap();
        let (q, prov2) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(p.to_bytes(), q.to_bytes());
        assert_eq!(prov, prov2);
        assert_eq!(checkpoint_bytes(&q, &prov2).unwrap(), bytes);
    }

    #[test]
    fn damage_is_detected() {
        let (p, prov) = sample();
        let bytes = checkpoint_bytes(&p, &prov).unwrap();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(parse_checkpoint(&bytes[..cut]), Err(ProbeError::CorruptCheckpoint(_))));
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(parse_checkpoint(&flipped), Err(ProbeError::CorruptCheckpoint(_))));
    }
}
