//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte tag `TSVAECK1`, a little-endian `u64` header length,
//! a JSON header (format version, model kind, element type, architecture,
//! standardization), then the raw little-endian parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, ModelParams};
use crate::error::{Error, Result};
use crate::ingest::StandardizationParams;

const MAGIC: &[u8; 8] = b"TSVAECK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointModel {
    Hvae(ModelParams<f32>),
    /// Test-mode stub whose reconstruction equals its input.
    IdentityStub { window: usize },
    /// Test-mode stub that reconstructs all zeros.
    ZeroStub { window: usize },
}

impl CheckpointModel {
    pub fn window(&self) -> usize {
        match self {
            CheckpointModel::Hvae(m) => m.window(),
            CheckpointModel::IdentityStub { window } | CheckpointModel::ZeroStub { window } => *window,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub series_id: String,
    pub model: CheckpointModel,
    pub standardization: StandardizationParams,
    /// Epochs completed when written.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    dtype: String,
    series_id: String,
    epoch: usize,
    window: usize,
    arch: Option<ArchConfig>,
    param_count: usize,
    standardization: StandardizationParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let (kind, arch, params): (&str, Option<ArchConfig>, &[f32]) = match &self.model {
            CheckpointModel::Hvae(m) => ("hvae", Some(m.arch.clone()), &m.params),
            CheckpointModel::IdentityStub { .. } => ("identity_stub", None, &[]),
            CheckpointModel::ZeroStub { .. } => ("zero_stub", None, &[]),
        };
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: kind.into(),
            dtype: "f32".into(),
            series_id: self.series_id.clone(),
            epoch: self.epoch,
            window: self.model.window(),
            arch,
            param_count: params.len(),
            standardization: self.standardization,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + params.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        if header.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
        }
        let data = &body[hlen..];
        if data.len() != header.param_count * 4 {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                header.param_count * 4,
                data.len()
            )));
        }
        let model = match header.kind.as_str() {
            "hvae" => {
                let arch = header.arch.ok_or_else(|| bad("hvae checkpoint without architecture"))?;
                let params = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                CheckpointModel::Hvae(ModelParams::from_params(&arch, params)?)
            }
            "identity_stub" => CheckpointModel::IdentityStub { window: header.window },
            "zero_stub" => CheckpointModel::ZeroStub { window: header.window },
            other => return Err(Error::Checkpoint(format!("unknown model kind '{other}'"))),
        };
        Ok(Checkpoint {
            series_id: header.series_id,
            model,
            standardization: header.standardization,
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
