//! Embedding files: `<id>.f32` holds little-endian f32 `[T x dim]`, and
//! `<id>.json` describes it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalError;

pub const EMBEDDING_FORMAT_VERSION: u32 = 1;

/// Sidecar of one exported sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingIndex {
    pub format_version: u32,
    pub id: String,
    pub split: String,
    pub n_frames: usize,
    pub dim: usize,
    /// `short`, `long`, `both`, or a baseline name.
    pub embedding: String,
    pub agents: usize,
    /// Always true: files hold agent-pooled embeddings.
    pub pooled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEmbedding {
    pub index: EmbeddingIndex,
    pub data: Vec<f32>,
}

impl SequenceEmbedding {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.index.dim..(t + 1) * self.index.dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub embedding: String,
    pub dim: usize,
    pub sequences: Vec<SequenceEmbedding>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |e| EvalError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Writes every sequence of the set. Existing files are only replaced with
/// `force`.
pub fn write_embeddings(dir: &Path, set: &EmbeddingSet, force: bool) -> Result<Vec<PathBuf>, EvalError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::with_capacity(2 * set.sequences.len());
    for s in &set.sequences {
        let bin = dir.join(format!("{}.f32", s.index.id));
        let side = dir.join(format!("{}.json", s.index.id));
        if !force && (bin.exists() || side.exists()) {
            return Err(EvalError::Io {
                path: bin,
                msg: "already exists (use --force to overwrite)".into(),
            });
        }
        if s.data.len() != s.index.n_frames * s.index.dim {
            return Err(EvalError::Shape(format!(
                "{}: {} values for {}x{}",
                s.index.id,
                s.data.len(),
                s.index.n_frames,
                s.index.dim
            )));
        }
        let bytes: Vec<u8> = s.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&bin, bytes).map_err(io(&bin))?;
        let json = serde_json::to_string_pretty(&s.index).expect("sidecar serializes");
        std::fs::write(&side, json + "\n").map_err(io(&side))?;
        written.push(bin);
        written.push(side);
    }
    Ok(written)
}

/// Reads every sidecar in `dir` (sorted by id) and its data file.
pub fn read_embeddings(dir: &Path) -> Result<EmbeddingSet, EvalError> {
    let mut sides: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    sides.sort();
    if sides.is_empty() {
        return Err(EvalError::Invalid(format!("{}: no embedding files", dir.display())));
    }
    let mut sequences = Vec::with_capacity(sides.len());
    for side in sides {
        let text = std::fs::read_to_string(&side).map_err(io(&side))?;
        let index: EmbeddingIndex = serde_json::from_str(&text).map_err(|e| EvalError::Io {
            path: side.clone(),
            msg: e.to_string(),
        })?;
        if index.format_version != EMBEDDING_FORMAT_VERSION {
            return Err(EvalError::Invalid(format!(
                "{}: embedding format {} is not supported",
                side.display(),
                index.format_version
            )));
        }
        let bin = side.with_extension("f32");
        let bytes = std::fs::read(&bin).map_err(io(&bin))?;
        if bytes.len() != 4 * index.n_frames * index.dim {
            return Err(EvalError::Io {
                path: bin,
                msg: format!(
                    "expected {} bytes, found {}",
                    4 * index.n_frames * index.dim,
                    bytes.len()
                ),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        sequences.push(SequenceEmbedding { index, data });
    }
    let first = &sequences[0].index;
    let (embedding, dim) = (first.embedding.clone(), first.dim);
    if let Some(bad) = sequences
        .iter()
        .find(|s| s.index.dim != dim || s.index.embedding != embedding)
    {
        return Err(EvalError::Shape(format!(
            "{} has {} {}, expected {} {}",
            bad.index.id, bad.index.embedding, bad.index.dim, embedding, dim
        )));
    }
    Ok(EmbeddingSet {
        embedding,
        dim,
        sequences,
    })
}
