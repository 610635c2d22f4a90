//! Binary checkpoints: `PLMC` magic, u32 format version, a length-prefixed
//! JSON header, then every tensor as length-prefixed name, rank, u32 dims and
//! row-major f32 data. All integers and floats are little-endian.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;
use crate::wordpiece::Vocabulary;

pub const MAGIC: &[u8; 4] = b"PLMC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: EncoderConfig,
    pub vocab_hash: String,
    pub step: u64,
    /// Classification label names, in head column order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub weights: ModelWeights<f32>,
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

pub fn encode(weights: &ModelWeights<f32>, header: &CheckpointHeader) -> Result<Vec<u8>> {
    if header.config != weights.config {
        return Err(Error::Checkpoint("header config does not match weights".into()));
    }
    let mut out = Vec::with_capacity(weights.n_params() * 4 + 1024);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    let json = serde_json::to_vec(header)?;
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    for (name, t) in weights.named_tensors() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape.len() as u32);
        for &d in &t.shape {
            put_u32(&mut out, d as u32);
        }
        for &x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parses a checkpoint, validating tensor names and shapes against the
/// header config. When `vocab` is given, its content hash must match.
pub fn decode(bytes: &[u8], vocab: Option<&Vocabulary>) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)?;
    header.config.validate()?;
    if let Some(vocab) = vocab {
        let hash = vocab.content_hash();
        if hash != header.vocab_hash {
            return Err(Error::Checkpoint(format!(
                "vocabulary hash mismatch: checkpoint {} vs vocabulary {hash}",
                header.vocab_hash
            )));
        }
        if vocab.len() != header.config.vocab_size {
            return Err(Error::Checkpoint("vocabulary size does not match config".into()));
        }
    }
    let mut tensors: HashMap<String, Tensor<f32>> = HashMap::new();
    while !r.done() {
        let n = r.u32()? as usize;
        let name =
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = r
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), Tensor::from_vec(&shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    let mut weights = ModelWeights::<f32>::zeros(header.config);
    let names: Vec<String> = weights.named_tensors().into_iter().map(|(n, _)| n).collect();
    for (slot, name) in weights.tensors_mut().into_iter().zip(&names) {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape != slot.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, config expects {:?}",
                t.shape, slot.shape
            )));
        }
        *slot = t;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint { header, weights })
}

pub fn save(path: &Path, weights: &ModelWeights<f32>, header: &CheckpointHeader) -> Result<()> {
    write_atomic(path, &encode(weights, header)?)
}

pub fn load(path: &Path, vocab: Option<&Vocabulary>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wordpiece::SPECIAL_TOKENS;

    fn setup() -> (ModelWeights<f32>, Vocabulary, CheckpointHeader) {
        let vocab = Vocabulary::from_tokens(
            SPECIAL_TOKENS
                .iter()
                .map(|s| s.to_string())
                .chain((0..7).map(|i| format!("w{i}")))
                .collect(),
        )
        .unwrap();
        let config = EncoderConfig {
            n_layers: 1,
            hidden_dim: 8,
            n_heads: 2,
            ff_dim: 16,
            max_seq_len: 6,
            vocab_size: vocab.len(),
            dropout_rate: 0.1,
            n_labels: 2,
        };
        let w = ModelWeights::init(config, 5).unwrap();
        let header = CheckpointHeader {
            config,
            vocab_hash: vocab.content_hash(),
            step: 17,
            labels: vec!["a".into(), "b".into()],
        };
        (w, vocab, header)
    }

    #[test]
    fn round_trip_is_exact() {
        let (w, vocab, header) = setup();
        let bytes = encode(&w, &header).unwrap();
        assert_eq!(&bytes[..4], b"PLMC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let ck = decode(&bytes, Some(&vocab)).unwrap();
        assert_eq!(ck.weights, w);
        assert_eq!(ck.header, header);
    }

    #[test]
    fn rejects_mismatches() {
        let (w, vocab, header) = setup();
        let bytes = encode(&w, &header).unwrap();
        let other = Vocabulary::from_tokens(
            vocab
                .tokens()
                .iter()
                .cloned()
                .rev()
                .skip(1)
                .chain(std::iter::once("zz".to_string()))
                .collect::<Vec<_>>(),
        );
        assert!(other.is_err());
        let mut tokens = vocab.tokens().to_vec();
        tokens[6] = "different".into();
        let other = Vocabulary::from_tokens(tokens).unwrap();
        let err = decode(&bytes, Some(&other)).unwrap_err();
        assert!(err.to_string().contains("hash mismatch"));

        assert!(decode(&bytes[..bytes.len() - 3], None).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, None).is_err());

        // Header claims a different hidden size than the stored tensors.
        let mut h2 = header.clone();
        h2.config.hidden_dim = 4;
        let json = serde_json::to_vec(&h2).unwrap();
        let old_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut forged = bytes[..8].to_vec();
        forged.extend_from_slice(&(json.len() as u32).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(&bytes[12 + old_len..]);
        let err = decode(&forged, None).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
