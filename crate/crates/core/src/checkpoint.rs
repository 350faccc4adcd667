//! Self-describing binary checkpoints.
//!
//! Layout: magic, format version (u32 LE), header length (u64 LE), JSON header,
//! raw little-endian f64 payload, then a SHA-256 of everything before it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DscError, Result};

pub const MAGIC: &[u8; 8] = b"DSCCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config_hash: String,
    pub step: u64,
    pub seed: u64,
    /// Resolved config in `key=value` form.
    pub config: String,
    pub instance_queue_capacity: usize,
    pub dense_queue_capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<NamedArray>,
}

pub fn checkpoint_file_name(step: u64) -> String {
    format!("ckpt_{step:08}")
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let arrays = self
            .arrays
            .iter()
            .map(|a| {
                let e = ArrayEntry {
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    offset,
                };
                offset += a.data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            arrays,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + offset * 8 + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.meta.format_version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| DscError::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
            return Err(corrupt("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(DscError::Checksum(path.to_path_buf()));
        }
        if &body[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(DscError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header overruns file"))?;
        let header: Header =
            serde_json::from_slice(&body[20..header_end]).map_err(|e| corrupt(&format!("header: {e}")))?;
        let payload = &body[header_end..];
        if payload.len() % 8 != 0 {
            return Err(corrupt("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let slice = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| corrupt(&format!("array {} overruns payload", e.name)))?;
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data: slice.to_vec(),
            });
        }
        Ok(Self {
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(checkpoint_file_name(self.meta.step));
        let tmp = dir.join(format!("{}.tmp", checkpoint_file_name(self.meta.step)));
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| DscError::io(&tmp, self.meta.step, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| DscError::io(&path, self.meta.step, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DscError::io(path, 0, e))?;
        Self::from_bytes(&bytes, path)
    }
}
