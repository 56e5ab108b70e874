//! Binary checkpoints: magic, format version, a JSON header, little-endian
//! tensor blobs and a SHA-256 trailer over everything before it.
//!
//! ```text
//! b"DDPTCKPT" | u32 version | u64 header_len | header JSON | blobs | sha256
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::toy_lm::{LmConfig, ToyLm, Vocab};

pub const MAGIC: &[u8; 8] = b"DDPTCKPT";
pub const FORMAT_VERSION: u32 = 1;
const SCALAR_WIDTH: usize = 8;
const PREFIX: usize = 8 + 4 + 8;
const TRAILER: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    scalar_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab: Option<Vec<String>>,
    pub tensors: Vec<(String, Tensor)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corruption(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    scalar_width: SCALAR_WIDTH,
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let blob_len: usize = self
            .tensors
            .iter()
            .map(|(_, t)| t.len() * SCALAR_WIDTH)
            .sum();
        let mut out = Vec::with_capacity(PREFIX + header.len() + blob_len + TRAILER);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Checks magic, then version, then checksum, then layout.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Compatibility {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < PREFIX + TRAILER {
            return Err(corrupt("truncated checkpoint"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - TRAILER);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(corrupt("checksum mismatch"));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(PREFIX))
            .filter(|&end| end <= body.len())
            .ok_or_else(|| corrupt("header length exceeds file"))?;
        let header: Header = serde_json::from_slice(&body[PREFIX..header_end])
            .map_err(|e| corrupt(format!("bad header: {e}")))?;
        let mut pos = header_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            if entry.scalar_width != SCALAR_WIDTH {
                return Err(corrupt(format!(
                    "{}: unsupported scalar width {}",
                    entry.name, entry.scalar_width
                )));
            }
            let n = entry
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt(format!("{}: shape overflows", entry.name)))?;
            let end = n
                .checked_mul(SCALAR_WIDTH)
                .and_then(|b| b.checked_add(pos))
                .filter(|&end| end <= body.len())
                .ok_or_else(|| corrupt(format!("{}: blob runs past the end", entry.name)))?;
            let data = body[pos..end]
                .chunks_exact(SCALAR_WIDTH)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
            pos = end;
        }
        if pos != body.len() {
            return Err(corrupt("trailing bytes after the last blob"));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            vocab: header.vocab,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Contract(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone())
            .map_err(|e| corrupt(format!("config snapshot: {e}")))
    }

    pub fn from_lm(lm: &ToyLm, vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            kind: "lm".into(),
            config: serde_json::to_value(lm.config())?,
            vocab: Some(vocab.tokens().to_vec()),
            tensors: lm
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect(),
        })
    }

    /// Restores a frozen LM and its vocabulary.
    pub fn into_lm(self) -> Result<(ToyLm, Vocab)> {
        self.expect_kind("lm")?;
        let cfg: LmConfig = self.config_as()?;
        let vocab = Vocab::from_tokens(
            self.vocab
                .ok_or_else(|| corrupt("lm checkpoint without vocabulary"))?,
        )?;
        let lm = ToyLm::from_tensors(cfg, vocab.len(), self.tensors, true)?;
        Ok((lm, vocab))
    }

    pub fn from_denoiser(d: &Denoiser) -> Result<Self> {
        Ok(Self {
            kind: "denoiser".into(),
            config: serde_json::to_value(d.config())?,
            vocab: None,
            tensors: d
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone()))
                .collect(),
        })
    }

    pub fn into_denoiser(self) -> Result<Denoiser> {
        self.expect_kind("denoiser")?;
        let cfg: DenoiserConfig = self.config_as()?;
        Denoiser::from_tensors(cfg, self.tensors)
    }

    /// Optimized context embeddings, one per held-out sample.
    pub fn from_contexts(contexts: &[Tensor]) -> Self {
        Self {
            kind: "contexts".into(),
            config: serde_json::Value::Null,
            vocab: None,
            tensors: contexts
                .iter()
                .enumerate()
                .map(|(i, t)| (format!("context.{i}"), t.clone()))
                .collect(),
        }
    }

    pub fn into_contexts(self) -> Result<Vec<Tensor>> {
        self.expect_kind("contexts")?;
        Ok(self.tensors.into_iter().map(|(_, t)| t).collect())
    }
}
