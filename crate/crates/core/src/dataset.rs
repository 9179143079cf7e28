//! On-disk trajectory dataset.
//!
//! ```text
//! <root>/manifest.json
//! <root>/sequences/<id>/agent<a>.f32      little-endian f32, row-major [T x C]
//! <root>/sequences/<id>/agent<a>.valid    one byte (0 or 1) per frame
//! <root>/sequences/<id>/labels/<name>.i32 | .f32   per-frame labels [T]
//! ```
//!
//! Sequence-level labels live in the manifest keyed by sequence id. The reader
//! records every file it opens so callers can audit which splits were touched.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::features::{ChannelLayout, FeatureSequence};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLevel {
    Sequence,
    Frame,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// A named evaluation task. Sequence-level labels are read from the manifest,
/// frame-level labels from the per-sequence label file of the same name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub level: TaskLevel,
    pub kind: TaskKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelDtype {
    I32,
    F32,
}

impl LabelDtype {
    fn extension(self) -> &'static str {
        match self {
            LabelDtype::I32 => "i32",
            LabelDtype::F32 => "f32",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelFile {
    pub name: String,
    pub dtype: LabelDtype,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: String,
    pub split: String,
    pub n_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub frame_rate_hz: f64,
    pub n_agents: usize,
    pub channels: ChannelLayout,
    pub tasks: Vec<TaskSpec>,
    pub frame_label_files: Vec<LabelFile>,
    pub sequences: Vec<SequenceEntry>,
    pub sequence_labels: BTreeMap<String, BTreeMap<String, f64>>,
    /// Free-form record of how the dataset was produced.
    #[serde(default)]
    pub generator: Option<serde_json::Value>,
}

impl Manifest {
    pub fn split_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for s in &self.sequences {
            *out.entry(s.split.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn ids_in_split(&self, split: &str) -> Vec<String> {
        self.sequences
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.id.clone())
            .collect()
    }

    pub fn entry(&self, id: &str) -> Option<&SequenceEntry> {
        self.sequences.iter().find(|s| s.id == id)
    }

    pub fn task(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }

    fn check(&self, path: &Path) -> Result<(), DataError> {
        let bad = |msg: String| DataError::Manifest {
            path: path.to_path_buf(),
            msg,
        };
        if self.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.n_agents == 0 || !(self.frame_rate_hz > 0.0) {
            return Err(bad("n_agents and frame_rate_hz must be positive".into()));
        }
        ChannelLayout::new(
            self.channels.names.clone(),
            self.channels.kinds.clone(),
            self.channels.action_channels.clone(),
        )
        .map_err(|e| bad(e.to_string()))?;
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.sequences {
            if !seen.insert(&s.id) {
                return Err(bad(format!("duplicate sequence id {}", s.id)));
            }
            if s.id.is_empty() || s.id.contains(['/', '\\']) || s.id.starts_with('.') {
                return Err(bad(format!("invalid sequence id {:?}", s.id)));
            }
        }
        Ok(())
    }
}

/// Per-frame label series.
#[derive(Clone, Debug, PartialEq)]
pub enum LabelSeries {
    Int(Vec<i32>),
    Float(Vec<f32>),
}

impl LabelSeries {
    pub fn len(&self) -> usize {
        match self {
            LabelSeries::Int(v) => v.len(),
            LabelSeries::Float(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            LabelSeries::Int(v) => v.iter().map(|&x| f64::from(x)).collect(),
            LabelSeries::Float(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }

    fn dtype(&self) -> LabelDtype {
        match self {
            LabelSeries::Int(_) => LabelDtype::I32,
            LabelSeries::Float(_) => LabelDtype::F32,
        }
    }
}

/// One recording: per-agent features plus per-frame labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub split: String,
    pub agents: Vec<FeatureSequence>,
    pub frame_labels: BTreeMap<String, LabelSeries>,
}

impl Sequence {
    pub fn n_frames(&self) -> usize {
        self.agents.first().map_or(0, |a| a.n_frames)
    }
}

/// Read access to a dataset directory.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
    access: Mutex<Vec<PathBuf>>,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, DataError> {
        let root = root.as_ref().to_path_buf();
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        manifest.check(&path)?;
        Ok(Self {
            root,
            access: Mutex::new(vec![path]),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Files opened so far, in order.
    pub fn access_log(&self) -> Vec<PathBuf> {
        self.access.lock().expect("access log lock").clone()
    }

    fn read(&self, path: &Path) -> Result<Vec<u8>, DataError> {
        self.access.lock().expect("access log lock").push(path.to_path_buf());
        fs::read(path).map_err(io_err(path))
    }

    pub fn load_sequence(&self, id: &str) -> Result<Sequence, DataError> {
        let entry = self
            .manifest
            .entry(id)
            .ok_or_else(|| DataError::Invalid(format!("unknown sequence id {id}")))?;
        let dir = self.root.join("sequences").join(id);
        let layout = &self.manifest.channels;
        let c = layout.channels();
        let t = entry.n_frames;
        let vch = layout.validity_channel();
        let mut agents = Vec::with_capacity(self.manifest.n_agents);
        for a in 0..self.manifest.n_agents {
            let fpath = dir.join(format!("agent{a}.f32"));
            let bytes = self.read(&fpath)?;
            if bytes.len() != 4 * t * c {
                return Err(DataError::Schema(format!(
                    "{}: expected {} bytes for {t} frames x {c} channels, found {}",
                    fpath.display(),
                    4 * t * c,
                    bytes.len()
                )));
            }
            let mut data = vec![0.0f64; c * t];
            for (i, chunk) in bytes.chunks_exact(4).enumerate() {
                let (frame, ch) = (i / c, i % c);
                data[ch * t + frame] = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
            }
            let vpath = dir.join(format!("agent{a}.valid"));
            let vbytes = self.read(&vpath)?;
            if vbytes.len() != t {
                return Err(DataError::Schema(format!(
                    "{}: expected {t} validity bytes, found {}",
                    vpath.display(),
                    vbytes.len()
                )));
            }
            for (frame, &b) in vbytes.iter().enumerate() {
                if b > 1 || (data[vch * t + frame] > 0.5) != (b == 1) {
                    return Err(DataError::Schema(format!(
                        "{}: validity byte at frame {frame} disagrees with the validity channel",
                        vpath.display()
                    )));
                }
            }
            agents.push(FeatureSequence::new(layout.clone(), t, data).map_err(|e| DataError::Schema(e.to_string()))?);
        }
        let mut frame_labels = BTreeMap::new();
        for lf in &self.manifest.frame_label_files {
            let path = dir.join("labels").join(format!("{}.{}", lf.name, lf.dtype.extension()));
            let bytes = self.read(&path)?;
            if bytes.len() != 4 * t {
                return Err(DataError::Schema(format!(
                    "{}: expected {} bytes, found {}",
                    path.display(),
                    4 * t,
                    bytes.len()
                )));
            }
            let series = match lf.dtype {
                LabelDtype::I32 => LabelSeries::Int(
                    bytes
                        .chunks_exact(4)
                        .map(|b| i32::from_le_bytes(b.try_into().expect("4 bytes")))
                        .collect(),
                ),
                LabelDtype::F32 => LabelSeries::Float(
                    bytes
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                        .collect(),
                ),
            };
            frame_labels.insert(lf.name.clone(), series);
        }
        Ok(Sequence {
            id: id.to_string(),
            split: entry.split.clone(),
            agents,
            frame_labels,
        })
    }
}

/// Writes a dataset directory sequence by sequence, then the manifest.
pub struct DatasetWriter {
    root: PathBuf,
}

impl DatasetWriter {
    /// Fails when `root` holds anything unless `force` is set, in which case
    /// only a previous manifest and `sequences/` tree are removed.
    pub fn create(root: impl AsRef<Path>, force: bool) -> Result<Self, DataError> {
        let root = root.as_ref().to_path_buf();
        if root.exists() {
            let non_empty = fs::read_dir(&root).map_err(io_err(&root))?.next().is_some();
            if non_empty {
                if !force {
                    return Err(DataError::Invalid(format!(
                        "{} is not empty (use --force to overwrite)",
                        root.display()
                    )));
                }
                let manifest = root.join("manifest.json");
                if manifest.exists() {
                    fs::remove_file(&manifest).map_err(io_err(&manifest))?;
                }
                let seqs = root.join("sequences");
                if seqs.exists() {
                    fs::remove_dir_all(&seqs).map_err(io_err(&seqs))?;
                }
            }
        }
        fs::create_dir_all(root.join("sequences")).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_sequence(&self, seq: &Sequence) -> Result<(), DataError> {
        let dir = self.root.join("sequences").join(&seq.id);
        fs::create_dir_all(dir.join("labels")).map_err(io_err(&dir))?;
        for (a, feat) in seq.agents.iter().enumerate() {
            let (c, t) = (feat.channels(), feat.n_frames);
            let mut bytes = Vec::with_capacity(4 * c * t);
            for frame in 0..t {
                for ch in 0..c {
                    bytes.extend_from_slice(&(feat.data[ch * t + frame] as f32).to_le_bytes());
                }
            }
            write_file(&dir.join(format!("agent{a}.f32")), &bytes)?;
            let valid: Vec<u8> = feat.validity().iter().map(|&v| u8::from(v)).collect();
            write_file(&dir.join(format!("agent{a}.valid")), &valid)?;
        }
        for (name, series) in &seq.frame_labels {
            let path = dir
                .join("labels")
                .join(format!("{name}.{}", series.dtype().extension()));
            let bytes: Vec<u8> = match series {
                LabelSeries::Int(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                LabelSeries::Float(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            };
            write_file(&path, &bytes)?;
        }
        Ok(())
    }

    pub fn finish(self, manifest: &Manifest) -> Result<PathBuf, DataError> {
        let path = self.root.join("manifest.json");
        manifest.check(&path)?;
        let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        write_file(&path, text.as_bytes())?;
        Ok(path)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}
