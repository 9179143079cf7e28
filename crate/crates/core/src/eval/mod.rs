//! Frozen-representation evaluation: agent pooling, linear probes, the PCA
//! baseline, timescale-restricted embeddings, reports and embedding files.

mod export;
mod pca;
mod probe;
mod report;
mod suite;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{DataError, TaskLevel};
use crate::model::Embedding;
use crate::Tensor;

pub use export::{read_embeddings, write_embeddings, EmbeddingIndex, EmbeddingSet, SequenceEmbedding};
pub use pca::{fit_pca, Pca};
pub use probe::{fit_logistic, fit_ridge, macro_f1, mse, LogisticProbe, ProbeOptions, RidgeProbe, Standardizer};
pub use report::{merge_result_files, read_results, render_table, results_to_csv, summary_table, write_report};
pub use suite::{model_embeddings, pca_embeddings, run_probe_suite};

pub const SEQUENCE_AGGREGATION: &str = "time-mean of pooled frame embeddings";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("agents have different frame counts or widths: {0}")]
    Shape(String),
    #[error("training labels for {task} contain a single class")]
    SingleClass { task: String },
    #[error("no {split} samples for task {task}")]
    NoSamples { task: String, split: String },
    #[error("sequence {0} is not in the dataset")]
    UnknownSequence(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("{path}: {msg}")]
    Io { path: std::path::PathBuf, msg: String },
}

/// Which part of the embedding is probed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timescale {
    Short,
    Long,
    Both,
}

impl Timescale {
    pub const ALL: [Timescale; 3] = [Timescale::Short, Timescale::Long, Timescale::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            Timescale::Short => "short",
            Timescale::Long => "long",
            Timescale::Both => "both",
        }
    }

    /// `[T x D]` restriction of an embedding.
    pub fn select(self, e: &Embedding) -> Tensor {
        let (dim, data) = match self {
            Timescale::Short => (e.short_dim, e.short.clone()),
            Timescale::Long => (e.long_dim, e.long.clone()),
            Timescale::Both => (e.full_dim(), e.full()),
        };
        Tensor::new(vec![e.n_frames, dim], data).expect("embedding shape")
    }
}

impl fmt::Display for Timescale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Timescale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "short" => Ok(Timescale::Short),
            "long" => Ok(Timescale::Long),
            "both" => Ok(Timescale::Both),
            other => Err(format!("unknown timescale {other:?} (expected short, long or both)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    F1,
    #[serde(rename = "MSE")]
    Mse,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::F1 => "F1",
            Metric::Mse => "MSE",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == Metric::F1
    }

    pub fn arrow(self) -> &'static str {
        if self.higher_is_better() {
            "(↑)"
        } else {
            "(↓)"
        }
    }
}

/// One probe metric. F1 is in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: String,
    pub level: TaskLevel,
    pub metric: Metric,
    pub value: f64,
    /// `short`, `long`, `both`, or a baseline name.
    pub embedding: String,
    pub split: String,
    pub seed: u64,
}

/// Concatenation of the agent mean and the agent max-minus-min, per frame.
/// Every input is `[T x D]`; the output is `[T x 2D]`.
pub fn pool_embeddings(agents: &[Tensor]) -> Result<Tensor, EvalError> {
    let first = agents.first().ok_or_else(|| EvalError::Shape("no agents".into()))?;
    let (t_len, d) = (first.dim(0), first.dim(1));
    if let Some(bad) = agents.iter().find(|a| a.shape() != first.shape()) {
        return Err(EvalError::Shape(format!("{:?} vs {:?}", bad.shape(), first.shape())));
    }
    let n = agents.len() as f64;
    let mut out = vec![0.0; t_len * 2 * d];
    // Summing in sorted order makes the mean independent of agent order.
    let mut vals = vec![0.0; agents.len()];
    for t in 0..t_len {
        let row = &mut out[t * 2 * d..(t + 1) * 2 * d];
        for k in 0..d {
            for (v, a) in vals.iter_mut().zip(agents) {
                *v = a.data()[t * d + k];
            }
            vals.sort_by(f64::total_cmp);
            row[k] = vals.iter().sum::<f64>() / n;
            row[d + k] = vals[vals.len() - 1] - vals[0];
        }
    }
    Ok(Tensor::new(vec![t_len, 2 * d], out).expect("pooled shape"))
}

/// Mean over the rows where `valid` holds (all rows when none are valid).
pub fn time_mean(x: &Tensor, valid: &[bool]) -> Vec<f64> {
    let d = x.dim(1);
    let any = valid.iter().any(|&v| v);
    let mut acc = vec![0.0; d];
    let mut n = 0usize;
    for t in 0..x.dim(0) {
        if any && !valid[t] {
            continue;
        }
        acc.iter_mut().zip(x.row(t)).for_each(|(a, v)| *a += v);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    acc
}

#[cfg(test)]
mod tests;
