//! Checkpoint files.
//!
//! Layout: 8-byte magic `ATSGCKP1`, u64 LE length of the JSON index, the
//! index itself, then every tensor as contiguous f32 LE values. The index
//! records each tensor's shape and byte offset within the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::UNet;
use super::params::{NetworkConfig, ParamKind, ParamTensor, ParameterSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ATSGCKP1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet<f32>,
    /// Number of completed training epochs.
    pub epoch: usize,
    /// Optimizer velocities aligned with `params.tensors`, present in resumable checkpoints.
    pub velocity: Option<Vec<Vec<f32>>>,
    /// Free-form training metadata (seed, validation score, ...).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
    offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    velocity_offset: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    config: NetworkConfig,
    epoch: usize,
    #[serde(default)]
    meta: serde_json::Value,
    payload_bytes: usize,
    tensors: Vec<IndexEntry>,
}

impl Checkpoint {
    pub fn new(params: ParameterSet<f32>, epoch: usize) -> Self {
        Checkpoint {
            params,
            epoch,
            velocity: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(v) = &self.velocity {
            if v.len() != self.params.tensors.len()
                || v.iter().zip(&self.params.tensors).any(|(a, t)| a.len() != t.data.len())
            {
                return Err(Error::Checkpoint("velocity buffers do not mirror parameters".into()));
            }
        }
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.params.tensors.len());
        for t in &self.params.tensors {
            entries.push(IndexEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                kind: t.kind,
                offset,
                velocity_offset: None,
            });
            offset += t.data.len() * 4;
        }
        if let Some(v) = &self.velocity {
            for (e, buf) in entries.iter_mut().zip(v) {
                e.velocity_offset = Some(offset);
                offset += buf.len() * 4;
            }
        }
        let index = Index {
            config: self.params.config.clone(),
            epoch: self.epoch,
            meta: self.meta.clone(),
            payload_bytes: offset,
            tensors: entries,
        };
        let json = serde_json::to_vec(&index)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.params.tensors {
            out.extend(t.data.iter().flat_map(|v| v.to_le_bytes()));
        }
        if let Some(v) = &self.velocity {
            for buf in v {
                out.extend(buf.iter().flat_map(|x| x.to_le_bytes()));
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let jlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(jlen))
            .ok_or_else(|| bad("truncated index".into()))?;
        let index: Index =
            serde_json::from_slice(body).map_err(|e| bad(format!("malformed index: {e}")))?;
        let payload = &bytes[16 + jlen..];
        if payload.len() != index.payload_bytes {
            return Err(bad(format!(
                "payload has {} bytes, index declares {}",
                payload.len(),
                index.payload_bytes
            )));
        }
        let read = |offset: usize, count: usize, name: &str| -> Result<Vec<f32>> {
            let end = count
                .checked_mul(4)
                .and_then(|b| b.checked_add(offset))
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| bad(format!("tensor `{name}` exceeds the payload")))?;
            Ok(payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut tensors = Vec::with_capacity(index.tensors.len());
        let mut velocity = Vec::new();
        let with_velocity = index.tensors.first().is_some_and(|e| e.velocity_offset.is_some());
        for e in &index.tensors {
            let count: usize = e.shape.iter().product();
            tensors.push(ParamTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                kind: e.kind,
                data: read(e.offset, count, &e.name)?,
            });
            match (with_velocity, e.velocity_offset) {
                (true, Some(o)) => velocity.push(read(o, count, &e.name)?),
                (false, None) => {}
                _ => return Err(bad(format!("tensor `{}` has inconsistent velocity data", e.name))),
            }
        }
        let params = ParameterSet {
            config: index.config,
            tensors,
        };
        UNet::new(&params.config)?.check(&params)?;
        Ok(Checkpoint {
            params,
            epoch: index.epoch,
            velocity: with_velocity.then_some(velocity),
            meta: index.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
