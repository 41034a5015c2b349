//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "RVCKPT\0\0"
//! version   u32
//! hdr_len   u32
//! header    hdr_len bytes of UTF-8 JSON (config, attributes, vocabulary,
//!           vocabulary fingerprint, tensor names and shapes)
//! payload   every tensor as f64 little-endian, in header order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{weight_layout, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tokenizer::Vocabulary;

const MAGIC: &[u8; 8] = b"RVCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Refuse headers beyond this size before allocating.
const MAX_HEADER: usize = 64 << 20;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    attributes: Vec<String>,
    vocab_fingerprint: String,
    vocabulary: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Trained weights with the vocabulary and attribute names they were
/// trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub attributes: Vec<String>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, vocab: Vocabulary, attributes: Vec<String>) -> Result<Self> {
        if params.config().vocab_size != vocab.len() {
            return Err(Error::Mismatch(format!(
                "model vocabulary size {} but vocabulary has {} entries",
                params.config().vocab_size,
                vocab.len()
            )));
        }
        if params.config().num_attributes != attributes.len() {
            return Err(Error::Mismatch(format!(
                "model has {} attribute classes but {} names were given",
                params.config().num_attributes,
                attributes.len()
            )));
        }
        Ok(Self {
            params,
            vocab,
            attributes,
        })
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = self.params.config().clone();
        let header = Header {
            tensors: weight_layout(&config)
                .into_iter()
                .map(|(name, shape)| TensorEntry { name, shape })
                .collect(),
            config,
            attributes: self.attributes.clone(),
            vocab_fingerprint: self.vocab.fingerprint(),
            vocabulary: self.vocab.to_json(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.params.num_values() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.weights().iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hdr_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        if hdr_len > MAX_HEADER || 16 + hdr_len > bytes.len() {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + hdr_len])?;
        header.config.validate()?;

        let vocab = Vocabulary::from_json(&header.vocabulary)?;
        if vocab.fingerprint() != header.vocab_fingerprint {
            return Err(Error::Mismatch(
                "vocabulary fingerprint does not match".into(),
            ));
        }
        let layout = weight_layout(&header.config);
        if layout.len() != header.tensors.len()
            || layout
                .iter()
                .zip(&header.tensors)
                .any(|((name, shape), e)| *name != e.name || *shape != e.shape)
        {
            return Err(Error::Mismatch(
                "tensor table does not match the model config".into(),
            ));
        }

        let payload = &bytes[16 + hdr_len..];
        let expected: usize = layout
            .iter()
            .map(|(_, s)| s.iter().try_fold(8usize, |acc, &d| acc.checked_mul(d)))
            .try_fold(0usize, |acc, n| n.and_then(|n| acc.checked_add(n)))
            .ok_or_else(|| Error::Format("tensor sizes overflow".into()))?;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload has {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(layout.len());
        for (_, shape) in layout {
            let n: usize = shape.iter().product();
            let data = payload[offset..offset + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += n * 8;
            tensors.push(Tensor::new(shape, data)?);
        }
        let params = ModelParams::from_tensors(header.config, tensors)?;
        Self::new(params, vocab, header.attributes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks that the stored vocabulary is `expected`.
    pub fn load_with_vocab(path: impl AsRef<Path>, expected: &Vocabulary) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.vocab.fingerprint() != expected.fingerprint() {
            return Err(Error::Mismatch(
                "checkpoint was trained with a different vocabulary".into(),
            ));
        }
        Ok(ckpt)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let vocab = Vocabulary::build(["a b c d"], 1).unwrap();
        let config = ModelConfig {
            layers: 1,
            hidden: 4,
            heads: 2,
            ffn: 8,
            vocab_size: vocab.len(),
            num_attributes: 2,
            max_len: 8,
        };
        let params = ModelParams::init(&config, 3).unwrap();
        Checkpoint::new(params, vocab, vec!["x".into(), "y".into()]).unwrap()
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.hash(), back.hash());
        assert_eq!(back.attribute_index("y").unwrap(), 1);
        assert!(back.attribute_index("z").is_err());
    }

    #[test]
    fn rejects_version_and_truncation() {
        let bytes = sample().to_bytes();
        let mut bumped = bytes.clone();
        bumped[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bumped),
            Err(Error::Version { found: 9, .. })
        ));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage-garbage-garbage").is_err());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let c = sample();
        let bytes = c.to_bytes();
        let hdr_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + hdr_len]).unwrap();
        let tampered = header.replacen("\"ffn\":8", "\"ffn\":6", 1);
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(&(tampered.len() as u32).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[16 + hdr_len..]);
        assert!(matches!(
            Checkpoint::from_bytes(&out),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn vocab_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert!(Checkpoint::load_with_vocab(&path, &c.vocab).is_ok());
        let other = Vocabulary::build(["a b c e"], 1).unwrap();
        assert!(matches!(
            Checkpoint::load_with_vocab(&path, &other),
            Err(Error::Mismatch(_))
        ));
    }
}
