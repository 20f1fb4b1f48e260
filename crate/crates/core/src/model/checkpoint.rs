//! Binary checkpoints.
//!
//! Layout: magic, format version (u32 LE), header length (u64 LE), JSON header
//! with the config and the parameter names and shapes, parameter data as f64 LE
//! in header order, then a SHA-256 digest of everything before it.

use super::config::ModelConfig;
use super::params::ParamStore;
use super::tensor::Matrix;
use super::ModelError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XABLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A config plus some or all of its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<(String, usize, usize)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(n, m)| (n.to_string(), m.rows(), m.cols()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(json.len() + 8 * self.params.scalar_count() + 64);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in self.params.iter() {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, ModelError> {
        let err = |m: &str| ModelError::Checkpoint(m.to_string());
        if b.len() < 20 || &b[..8] != CHECKPOINT_MAGIC {
            return Err(err("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(b[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        if b.len() < 20 + 32 {
            return Err(err("truncated checkpoint"));
        }
        let (body, digest) = b.split_at(b.len() - 32);
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize.checked_add(hlen).ok_or_else(|| err("truncated checkpoint"))?;
        if data_start > body.len() {
            return Err(err("truncated checkpoint"));
        }
        let header: Header = serde_json::from_slice(&body[20..data_start])
            .map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
        let scalars: usize = header.params.iter().map(|(_, r, c)| r * c).sum();
        if body.len() - data_start != 8 * scalars {
            return Err(err("truncated checkpoint"));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(err("checkpoint digest mismatch"));
        }
        let mut params = ParamStore::new();
        let mut chunks = body[data_start..].chunks_exact(8);
        for (name, r, c) in header.params {
            if params.id(&name).is_some() {
                return Err(ModelError::Checkpoint(format!("duplicate parameter {name}")));
            }
            let data = chunks
                .by_ref()
                .take(r * c)
                .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")))
                .collect();
            params.push(name, Matrix::from_vec(r, c, data));
        }
        Ok(Self {
            config: header.config,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
