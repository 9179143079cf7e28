//! Binary checkpoint container.
//!
//! ```text
//! b"BAMSCKPT" | u32 version | u64 header length | JSON header | f64 blobs
//! ```
//!
//! All integers and floats are little-endian. The header holds the model
//! spec, binning, normalization statistics, channel layout and the ordered
//! parameter table; blobs follow in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BamsModel, ModelSpec};
use crate::features::{ChannelLayout, NormStats};
use crate::hoa::BinningSpec;
use crate::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"BAMSCKPT";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated: {0}")]
    Truncated(String),
    #[error("corrupt checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint does not match its model spec: {0}")]
    Mismatch(String),
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    lr_multiplier: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    binning: BinningSpec,
    stats: NormStats,
    layout: ChannelLayout,
    params: Vec<ParamEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// Serializes a model with optional metadata (must be deterministic for
/// reproducible checkpoints).
pub fn checkpoint_bytes(model: &BamsModel, metadata: serde_json::Value) -> Vec<u8> {
    let header = Header {
        spec: model.spec.clone(),
        binning: model.binning.clone(),
        stats: model.stats.clone(),
        layout: model.layout.clone(),
        params: model
            .store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                lr_multiplier: p.lr_multiplier,
            })
            .collect(),
        metadata,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.store.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &BamsModel, path: &Path, metadata: serde_json::Value) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint_bytes(model, metadata)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(BamsModel, serde_json::Value), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(BamsModel, serde_json::Value), CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated("missing magic".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::Magic);
    }
    if bytes.len() < 20 {
        return Err(CheckpointError::Truncated("missing version or header length".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(CheckpointError::Truncated(format!(
            "header needs {hlen} bytes, {} available",
            body.len()
        )));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let blobs = &body[hlen..];
    let total: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if blobs.len() != 8 * total {
        let kind = if blobs.len() < 8 * total {
            "parameter data"
        } else {
            "trailing bytes"
        };
        return Err(CheckpointError::Truncated(format!(
            "{kind}: expected {} bytes, found {}",
            8 * total,
            blobs.len()
        )));
    }
    let mut model = BamsModel::new(header.spec, header.binning, header.stats, header.layout)
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    if model.store.len() != header.params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} parameters in file, model has {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let mut offset = 0;
    let ids: Vec<_> = model.store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.params) {
        let p = model.store.get_mut(id);
        if p.name != entry.name || p.tensor.shape() != entry.shape.as_slice() {
            return Err(CheckpointError::Mismatch(format!(
                "parameter {} {:?} does not match {} {:?}",
                entry.name,
                entry.shape,
                p.name,
                p.tensor.shape()
            )));
        }
        let n = p.tensor.len();
        let data: Vec<f64> = blobs[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * n;
        p.tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        p.lr_multiplier = entry.lr_multiplier;
    }
    Ok((model, header.metadata))
}
