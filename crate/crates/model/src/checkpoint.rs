//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic "UIVLMCKP" | u32 version | u32 header length | header JSON
//! u32 tensor count | per tensor: u32 name length, name, u32 rank,
//!                    u64 dims[rank], f32 data[product(dims)]
//! ```
//!
//! The JSON header carries the model and training configs and the vocab
//! hash.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::CheckpointError;
use crate::params::Params;

const MAGIC: &[u8; 8] = b"UIVLMCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    vocab_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab_hash: String,
    pub params: Params<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            train: self.train.clone(),
            vocab_hash: self.vocab_hash.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(self.params.num_params() * 4 + header.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let views = self.params.views();
        out.extend_from_slice(&(views.len() as u32).to_le_bytes());
        for (name, _, t) in views {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        header
            .model
            .validate()
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut params: Params<f32> = Params::init(&header.model, 0);
        let expected = params.names().len();
        let count = r.u32()? as usize;
        if count != expected {
            return Err(CheckpointError::Corrupt(format!(
                "{count} tensors, expected {expected}"
            )));
        }
        for (want, _, mut t) in params.views_mut() {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8_lossy(r.take(nlen)?);
            if name != want {
                return Err(CheckpointError::Corrupt(format!(
                    "found tensor {name}, expected {want}"
                )));
            }
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            if dims != t.shape() {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor {name} has shape {dims:?}, expected {:?}",
                    t.shape()
                )));
            }
            for x in t.iter_mut() {
                *x = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            vocab_hash: header.vocab_hash,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
