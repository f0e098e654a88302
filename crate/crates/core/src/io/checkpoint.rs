//! Self-describing tensor checkpoints.
//!
//! ```text
//! "UN2C" | version u32 | manifest length u32 | manifest (JSON) | payload | SHA-256
//! ```
//!
//! The manifest lists every tensor with its shape, dtype tag and byte offset
//! into the payload; the trailing digest covers everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use un2clip_autograd::Tensor;

use crate::error::{CoreError, Result};

pub const MAGIC: &[u8; 4] = b"UN2C";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub config_hash: String,
    pub seed: u64,
    pub rng_state: String,
    pub epoch: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    metadata: Metadata,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub metadata: Metadata,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, metadata: Metadata) -> Self {
        Self {
            kind: kind.into(),
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn take_prefixed(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            });
            offset += t.len() * 4;
        }
        let manifest = serde_json::to_vec(&Manifest {
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        })
        .expect("serializable");
        let mut out = Vec::with_capacity(12 + manifest.len() + offset + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(CoreError::Checkpoint("wrong magic bytes".into()));
        }
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(CoreError::DigestMismatch);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version > FORMAT_VERSION {
            return Err(CoreError::VersionAhead {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CoreError::DigestMismatch);
        }
        let mlen = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        let mend = 12usize
            .checked_add(mlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| CoreError::Checkpoint("manifest out of bounds".into()))?;
        let manifest: Manifest = serde_json::from_slice(&body[12..mend])
            .map_err(|e| CoreError::Checkpoint(format!("manifest: {e}")))?;
        let payload = &body[mend..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut next = 0usize;
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(CoreError::Checkpoint(format!(
                    "{}: unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            let n: usize = e.shape.iter().product();
            if e.offset != next || e.offset + 4 * n > payload.len() {
                return Err(CoreError::Checkpoint(format!(
                    "{}: offset {} overlaps or exceeds payload",
                    e.name, e.offset
                )));
            }
            let data = payload[e.offset..e.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::from_vec(&e.shape, data)?));
            next = e.offset + 4 * n;
        }
        if next != payload.len() {
            return Err(CoreError::Checkpoint("trailing payload bytes".into()));
        }
        Ok(Self {
            kind: manifest.kind,
            metadata: manifest.metadata,
            tensors,
        })
    }

    pub fn expect_kind(self, expected: &str) -> Result<Self> {
        if self.kind != expected {
            return Err(CoreError::KindMismatch {
                expected: expected.into(),
                found: self.kind,
            });
        }
        Ok(self)
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    super::write_atomic(path, &ck.encode())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    Checkpoint::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(
            "clip",
            Metadata {
                config_hash: "abc".into(),
                seed: 7,
                rng_state: "00".into(),
                epoch: 3,
                extra: BTreeMap::new(),
            },
        );
        ck.push(
            "a",
            Tensor::from_vec(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0]).unwrap(),
        );
        ck.push("b", Tensor::scalar(f32::EPSILON));
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        assert_eq!(back.kind, ck.kind);
        assert_eq!(back.metadata, ck.metadata);
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&ck.tensors) {
            assert_eq!(n1, n2);
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn truncation_and_corruption_fail_the_digest() {
        let bytes = sample().encode();
        for cut in [bytes.len() - 1, bytes.len() / 2, 13, 6] {
            assert!(matches!(
                Checkpoint::decode(&bytes[..cut]),
                Err(CoreError::DigestMismatch)
            ));
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 40;
        flipped[mid] ^= 1;
        assert!(matches!(
            Checkpoint::decode(&flipped),
            Err(CoreError::DigestMismatch)
        ));
    }

    #[test]
    fn wrong_magic_and_future_version() {
        let mut bytes = sample().encode();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(CoreError::Checkpoint(_))
        ));
        let mut bytes = sample().encode();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        let err = Checkpoint::decode(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('9') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn kind_mismatch() {
        let ck = Checkpoint::new("denoiser", Metadata::default());
        let err = Checkpoint::decode(&ck.encode())
            .unwrap()
            .expect_kind("clip")
            .unwrap_err();
        assert!(matches!(err, CoreError::KindMismatch { .. }));
    }
}
