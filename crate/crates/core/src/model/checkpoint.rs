//! Versioned single-file container for model weights.
//!
//! Layout: the 8-byte magic `DHNCKPT1`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! weight array and finally the codebook as little-endian `f64` values in
//! row-major order.

use std::fs;
use std::path::Path;

use dhn_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::codebook::{Codebook, CodebookSplit};
use crate::error::{Error, Result};
use crate::physics::NormStats;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DHNCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CodebookMeta {
    split: CodebookSplit,
    ids: Vec<usize>,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    arrays: Vec<ArrayMeta>,
    codebook: Option<CodebookMeta>,
    stats: Option<NormStats>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Model-agnostic checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Model family, e.g. `dhn` or `hnn`.
    pub kind: String,
    pub config: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
    pub codebook: Option<Codebook>,
    pub stats: Option<NormStats>,
    /// Free-form provenance (config hash, code version, ...).
    pub extra: serde_json::Value,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, t)| ArrayMeta {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
            codebook: self.codebook.as_ref().map(|cb| CodebookMeta {
                split: cb.split,
                ids: cb.ids().to_vec(),
                width: cb.width(),
            }),
            stats: self.stats.clone(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            push_f64s(&mut out, t.data());
        }
        if let Some(cb) = &self.codebook {
            push_f64s(&mut out, cb.codes().data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| Error::format("truncated checkpoint header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut cursor = 20 + hlen;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let end = cursor + 8 * n;
            let raw = bytes
                .get(cursor..end)
                .ok_or_else(|| Error::format("truncated checkpoint payload"))?;
            cursor = end;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for m in &header.arrays {
            arrays.push((m.name.clone(), Tensor::new(m.rows, m.cols, take(m.rows * m.cols)?)));
        }
        let codebook = match header.codebook {
            Some(m) => {
                let data = take(m.ids.len() * m.width)?;
                let n = m.ids.len();
                Some(Codebook::from_codes(m.split, m.ids, Tensor::new(n, m.width, data))?)
            }
            None => None,
        };
        if cursor != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - cursor
            )));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            arrays,
            codebook,
            stats: header.stats,
            extra: header.extra,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Fails unless the checkpoint holds a model of family `kind`.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::format(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)))
        }
    }
}
