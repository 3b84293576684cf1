//! `RTAG1` checkpoint container: magic, 8-byte little-endian header length,
//! JSON header, then raw little-endian `f64` tensors.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_params, ModelConfig};
use crate::numerics::{ParamStore, Tensor};
use crate::tables::Vocab;

pub const MAGIC: &[u8; 5] = b"RTAG1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Relative to the start of the payload.
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train_digest: String,
    pub vocab: Vec<String>,
    /// FNV-1a 64 of the payload, hex.
    pub payload_checksum: String,
    pub manifest: Vec<TensorEntry>,
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train_digest: String,
    pub vocab: Vocab,
    pub params: ParamStore,
}

fn fnv1a(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_params(&self.model, &self.params)?;
        let mut payload = Vec::with_capacity(self.params.numel() * 8);
        let mut manifest = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let start = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            manifest.push(TensorEntry {
                name: name.to_string(),
                dtype: "f64".into(),
                shape: t.shape().to_vec(),
                byte_offset: start,
                byte_length: payload.len() as u64 - start,
            });
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            train_digest: self.train_digest.clone(),
            vocab: self.vocab.tokens().to_vec(),
            payload_checksum: fnv1a(&payload),
            manifest,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses and fully validates `bytes`; nothing is returned unless the
    /// whole file checks out.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return Err(Error::Corruption("truncated header length".into()));
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes"));
        let rest = &rest[8..];
        if hlen > rest.len() as u64 {
            return Err(Error::Corruption(format!("header length {hlen} exceeds file")));
        }
        let (hbytes, payload) = rest.split_at(hlen as usize);
        let header: Header =
            serde_json::from_slice(hbytes).map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format_version {}", header.format_version)));
        }
        header.model.validate()?;
        if fnv1a(payload) != header.payload_checksum {
            return Err(Error::Corruption("payload checksum mismatch".into()));
        }
        let mut seen = HashSet::new();
        let mut cursor = 0u64;
        let mut params = ParamStore::new();
        for e in &header.manifest {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Corruption(format!("tensor `{}` listed twice", e.name)));
            }
            if e.dtype != "f64" {
                return Err(Error::Format(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
            }
            let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
            let end = e.byte_offset.checked_add(e.byte_length);
            if e.byte_offset < cursor || e.byte_length != numel * 8 || end.is_none_or(|end| end > payload.len() as u64) {
                return Err(Error::Corruption(format!("tensor `{}` region is invalid", e.name)));
            }
            let region = &payload[e.byte_offset as usize..(e.byte_offset + e.byte_length) as usize];
            let data = region
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            cursor = e.byte_offset + e.byte_length;
        }
        if cursor != payload.len() as u64 {
            return Err(Error::Corruption("trailing bytes after last tensor".into()));
        }
        check_params(&header.model, &params).map_err(|e| Error::Corruption(e.to_string()))?;
        let vocab = Vocab::from_tokens(header.vocab)?;
        if vocab.len() != header.model.vocab_size {
            return Err(Error::Corruption("vocabulary size does not match model".into()));
        }
        Ok(Checkpoint {
            model: header.model,
            train_digest: header.train_digest,
            vocab,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let vocab = Vocab::from_tokens(
            ["<pad>", "<bos>", "<eos>", "<unk>", "<hl>", "</hl>", "a", "b"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap();
        let model = ModelConfig {
            layers: 1,
            heads: 1,
            hidden: 4,
            ffn: 4,
            vocab_size: vocab.len(),
            max_len: 8,
            codebook_size: 2,
            codebook_count: 2,
            ..ModelConfig::default()
        };
        Checkpoint {
            params: init_params(&model, 9).unwrap(),
            model,
            train_digest: "abc".into(),
            vocab,
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.model, ck.model);
        for (name, t) in ck.params.iter() {
            let u = back.params.get(name).unwrap();
            let same = t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "{name}");
        }
    }

    #[test]
    fn rejects_bad_magic_and_flipped_payload() {
        let bytes = sample().to_bytes().unwrap();
        let mut b = bytes.clone();
        b[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Format(_))));
        let mut b = bytes.clone();
        let last = b.len() - 1;
        b[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Corruption(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}
