//! Named-tensor archive with role tags.
//!
//! Layout: `VSTA` | u32 version | u64 header length | JSON header | raw
//! little-endian f32 payload | SHA-256 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, VistaError};
use crate::param::{ParamStore, Role};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VSTA";
pub const VERSION: u32 = 1;
const DIGEST: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub role: String,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance: resolved config, hashes, stage.
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor<f32>>,
}

fn format_err(offset: usize, msg: impl Into<String>) -> VistaError {
    VistaError::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, meta: serde_json::Value) -> Self {
        let mut entries = Vec::with_capacity(store.len());
        let mut tensors = Vec::with_capacity(store.len());
        let mut offset = 0u64;
        for (_, p) in store.iter() {
            let bytes = (p.value.len() * 4) as u64;
            entries.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                dtype: "f32".into(),
                role: p.role.tag(p.frozen).into(),
                offset,
                bytes,
            });
            offset += bytes;
            tensors.push(p.value.clone());
        }
        Self {
            header: Header { tensors: entries, meta },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            out.extend_from_slice(&t.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + DIGEST {
            return Err(format_err(0, "checkpoint too short"));
        }
        if &bytes[..4] != MAGIC {
            return Err(format_err(0, "bad checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format_err(4, format!("checkpoint format version {version}, expected {VERSION}")));
        }
        let body = bytes.len() - DIGEST;
        if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
            return Err(format_err(body, "checkpoint integrity hash mismatch"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload = 16usize
            .checked_add(hlen)
            .filter(|&p| p <= body)
            .ok_or_else(|| format_err(8, "header length exceeds file"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..payload]).map_err(|e| format_err(16, format!("header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(format_err(16, format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
            }
            let start = payload + e.offset as usize;
            let end = start + e.bytes as usize;
            if end > body || e.bytes as usize != e.shape.iter().product::<usize>() * 4 {
                return Err(format_err(start, format!("tensor {} out of bounds", e.name)));
            }
            tensors.push(Tensor::from_le_bytes(&e.shape, &bytes[start..end])?);
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path)?;
        let ck = Self::from_bytes(&bytes)?;
        Ok((ck, hex::encode(Sha256::digest(&bytes))))
    }

    /// Copy every tensor into a store built with the same architecture.
    /// Names, shapes and role tags must match exactly.
    pub fn apply(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.header.tensors.len() != store.len() {
            return Err(VistaError::Data(format!(
                "checkpoint has {} tensors, model has {}",
                self.header.tensors.len(),
                store.len()
            )));
        }
        for (e, t) in self.header.tensors.iter().zip(&self.tensors) {
            let id = store
                .id(&e.name)
                .ok_or_else(|| VistaError::Data(format!("unknown tensor {} in checkpoint", e.name)))?;
            let (role, frozen) =
                Role::from_tag(&e.role).ok_or_else(|| VistaError::Data(format!("unknown role tag {}", e.role)))?;
            let p = store.get_mut(id);
            if p.role != role || p.value.shape() != t.shape() {
                return Err(VistaError::Data(format!("tensor {} does not match the model", e.name)));
            }
            p.value = t.clone();
            p.frozen = frozen;
        }
        Ok(())
    }
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
