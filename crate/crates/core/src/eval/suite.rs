use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::export::{EmbeddingIndex, EmbeddingSet, SequenceEmbedding, EMBEDDING_FORMAT_VERSION};
use super::probe::{fit_logistic, fit_ridge, macro_f1, mse, ProbeOptions};
use super::{fit_pca, pool_embeddings, time_mean, EvalError, Metric, ProbeResult, Timescale};
use crate::config::EvalConfig;
use crate::dataset::{Manifest, Sequence, TaskKind, TaskLevel, TaskSpec};
use crate::features::{apply_normalization, fit_normalization};
use crate::model::BamsModel;
use crate::Tensor;

fn joint_validity(seq: &Sequence) -> Vec<bool> {
    let mut valid = vec![true; seq.n_frames()];
    for a in &seq.agents {
        valid.iter_mut().zip(a.validity()).for_each(|(v, a)| *v &= a);
    }
    valid
}

fn to_set(tag: &str, agents: usize, items: Vec<(&Sequence, Tensor)>) -> EmbeddingSet {
    let dim = items.first().map_or(0, |(_, t)| t.dim(1));
    let sequences = items
        .into_iter()
        .map(|(s, t)| SequenceEmbedding {
            index: EmbeddingIndex {
                format_version: EMBEDDING_FORMAT_VERSION,
                id: s.id.clone(),
                split: s.split.clone(),
                n_frames: t.dim(0),
                dim: t.dim(1),
                embedding: tag.into(),
                agents,
                pooled: true,
            },
            data: t.data().iter().map(|&v| v as f32).collect(),
        })
        .collect();
    EmbeddingSet {
        embedding: tag.into(),
        dim,
        sequences,
    }
}

/// Frozen-model embeddings, pooled over agents, one set per timescale.
pub fn model_embeddings(
    model: &BamsModel,
    sequences: &[Sequence],
    which: &[Timescale],
) -> Result<Vec<EmbeddingSet>, EvalError> {
    let mut per_scale: Vec<Vec<(&Sequence, Tensor)>> = vec![Vec::with_capacity(sequences.len()); which.len()];
    let mut agents = 1;
    for s in sequences {
        let embs = s.agents.iter().map(|a| model.embed(a)).collect::<Result<Vec<_>, _>>()?;
        agents = embs.len();
        for (k, w) in which.iter().enumerate() {
            let parts: Vec<Tensor> = embs.iter().map(|e| w.select(e)).collect();
            per_scale[k].push((s, pool_embeddings(&parts)?));
        }
    }
    Ok(which
        .iter()
        .zip(per_scale)
        .map(|(w, items)| to_set(w.as_str(), agents, items))
        .collect())
}

/// Baseline: PCA of z-scored per-frame features, fitted on the valid frames
/// of `train_split`, with `dim` components per agent, pooled like the model
/// embeddings.
pub fn pca_embeddings(sequences: &[Sequence], train_split: &str, dim: usize) -> Result<EmbeddingSet, EvalError> {
    let train: Vec<&Sequence> = sequences.iter().filter(|s| s.split == train_split).collect();
    let stats =
        fit_normalization(train.iter().flat_map(|s| s.agents.iter())).map_err(|e| EvalError::Invalid(e.to_string()))?;
    let normalize = |s: &Sequence| -> Result<Vec<DMatrix<f64>>, EvalError> {
        s.agents
            .iter()
            .map(|a| {
                let n = apply_normalization(a, &stats).map_err(|e| EvalError::Invalid(e.to_string()))?;
                // [C x T] channel-major to [T x C] rows.
                Ok(DMatrix::from_row_slice(n.channels(), n.n_frames, &n.data).transpose())
            })
            .collect()
    };
    let mut rows: Vec<f64> = Vec::new();
    let mut n_rows = 0;
    let mut width = 0;
    for s in &train {
        for (m, a) in normalize(s)?.iter().zip(&s.agents) {
            width = m.ncols();
            for (t, ok) in a.validity().into_iter().enumerate() {
                if ok {
                    rows.extend(m.row(t).iter());
                    n_rows += 1;
                }
            }
        }
    }
    let x = DMatrix::from_row_slice(n_rows, width, &rows);
    let pca = fit_pca(&x, dim)?;
    let mut items = Vec::with_capacity(sequences.len());
    let mut agents = 1;
    for s in sequences {
        let parts: Vec<Tensor> = normalize(s)?
            .iter()
            .map(|m| {
                let z = pca.project(m);
                let (r, c) = z.shape();
                Tensor::new(vec![r, c], z.transpose().as_slice().to_vec()).expect("projection shape")
            })
            .collect();
        agents = parts.len();
        items.push((s, pool_embeddings(&parts)?));
    }
    Ok(to_set("pca", agents, items))
}

struct Rows {
    x: Vec<f64>,
    y: Vec<f64>,
    n: usize,
}

impl Rows {
    fn new() -> Self {
        Self {
            x: Vec::new(),
            y: Vec::new(),
            n: 0,
        }
    }

    fn matrix(&self, dim: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, dim, &self.x)
    }
}

fn gather(
    task: &TaskSpec,
    set: &EmbeddingSet,
    labels: &BTreeMap<&str, &Sequence>,
    manifest: &Manifest,
    split: &str,
    stride: usize,
) -> Option<Rows> {
    let mut rows = Rows::new();
    for s in set.sequences.iter().filter(|s| s.index.split == split) {
        let seq = labels[s.index.id.as_str()];
        let valid = joint_validity(seq);
        match task.level {
            TaskLevel::Sequence => {
                let y = manifest.sequence_labels.get(&s.index.id)?.get(&task.name)?;
                let t = Tensor::new(
                    vec![s.index.n_frames, s.index.dim],
                    s.data.iter().map(|&v| f64::from(v)).collect(),
                )
                .expect("embedding shape");
                rows.x.extend(time_mean(&t, &valid));
                rows.y.push(*y);
                rows.n += 1;
            }
            TaskLevel::Frame => {
                let series = seq.frame_labels.get(&task.name)?.to_f64();
                for t in (0..s.index.n_frames).step_by(stride) {
                    if valid[t] {
                        rows.x.extend(s.row(t).iter().map(|&v| f64::from(v)));
                        rows.y.push(series[t]);
                        rows.n += 1;
                    }
                }
            }
        }
    }
    Some(rows)
}

fn probe_task(
    task: &TaskSpec,
    set: &EmbeddingSet,
    labels: &BTreeMap<&str, &Sequence>,
    manifest: &Manifest,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Option<ProbeResult>, EvalError> {
    let (Some(train), Some(test)) = (
        gather(task, set, labels, manifest, &cfg.train_split, cfg.frame_stride),
        gather(task, set, labels, manifest, &cfg.test_split, cfg.frame_stride),
    ) else {
        log::warn!("labels for task {} are missing; skipping it", task.name);
        return Ok(None);
    };
    for (rows, split) in [(&train, &cfg.train_split), (&test, &cfg.test_split)] {
        if rows.n == 0 {
            return Err(EvalError::NoSamples {
                task: task.name.clone(),
                split: split.clone(),
            });
        }
    }
    let opts = ProbeOptions::from(cfg);
    let (xtr, xte) = (train.matrix(set.dim), test.matrix(set.dim));
    let (metric, value) = match task.kind {
        TaskKind::Regression => {
            let probe = fit_ridge(&xtr, &train.y, &opts)?;
            (Metric::Mse, mse(&test.y, &probe.predict(&xte)))
        }
        TaskKind::Classification => {
            let ytr: Vec<i64> = train.y.iter().map(|v| v.round() as i64).collect();
            let yte: Vec<i64> = test.y.iter().map(|v| v.round() as i64).collect();
            let probe = fit_logistic(&xtr, &ytr, &opts, &task.name)?;
            (Metric::F1, macro_f1(&yte, &probe.predict(&xte)))
        }
    };
    Ok(Some(ProbeResult {
        task: task.name.clone(),
        level: task.level,
        metric,
        value,
        embedding: set.embedding.clone(),
        split: cfg.test_split.clone(),
        seed,
    }))
}

/// Fits one linear probe per manifest task on the train split and scores it
/// on the test split. Tasks with missing labels are skipped with a warning
/// and returned by name. Tasks run on up to `threads` workers; the output
/// order follows the manifest.
pub fn run_probe_suite(
    set: &EmbeddingSet,
    manifest: &Manifest,
    sequences: &[Sequence],
    cfg: &EvalConfig,
    seed: u64,
    threads: usize,
) -> Result<(Vec<ProbeResult>, Vec<String>), EvalError> {
    let labels: BTreeMap<&str, &Sequence> = sequences.iter().map(|s| (s.id.as_str(), s)).collect();
    for s in &set.sequences {
        let seq = labels
            .get(s.index.id.as_str())
            .ok_or_else(|| EvalError::UnknownSequence(s.index.id.clone()))?;
        if seq.n_frames() != s.index.n_frames {
            return Err(EvalError::Shape(format!(
                "{}: embedding has {} frames, dataset has {}",
                s.index.id,
                s.index.n_frames,
                seq.n_frames()
            )));
        }
    }
    let tasks = &manifest.tasks;
    let workers = threads.clamp(1, tasks.len().max(1));
    let mut outcomes: Vec<Option<Result<Option<ProbeResult>, EvalError>>> = (0..tasks.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = tasks.len().div_ceil(workers).max(1);
        for (task_chunk, out_chunk) in tasks.chunks(chunk).zip(outcomes.chunks_mut(chunk)) {
            let labels = &labels;
            scope.spawn(move || {
                for (task, out) in task_chunk.iter().zip(out_chunk.iter_mut()) {
                    *out = Some(probe_task(task, set, labels, manifest, cfg, seed));
                }
            });
        }
    });
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for (task, out) in tasks.iter().zip(outcomes) {
        match out.expect("every task ran")? {
            Some(r) => results.push(r),
            None => skipped.push(task.name.clone()),
        }
    }
    Ok((results, skipped))
}
