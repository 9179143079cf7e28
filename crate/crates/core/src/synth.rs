//! Labeled synthetic behavior with structure at two timescales.
//!
//! Each sequence draws global factors (agent class, target speed, gain) that
//! hold for its whole length, and a hidden regime chain (idle, walk, turn,
//! burst) that switches on a grid of `dwell_min` frames. A slowly wandering
//! difficulty level scales the action noise. Observations integrate the
//! actions. The generator emits feature sequences directly.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{ConfigError, DataConfig};
use crate::dataset::{
    DataError, DatasetWriter, LabelDtype, LabelFile, LabelSeries, Manifest, Sequence, SequenceEntry, TaskKind,
    TaskLevel, TaskSpec, FORMAT_VERSION,
};
use crate::features::{ChannelKind, ChannelLayout, FeatureSequence};

pub const REGIMES: [&str; 4] = ["idle", "walk", "turn", "burst"];
pub const SPLITS: [&str; 3] = ["train", "public", "private"];

const SPLIT_SALT: u64 = 0x5eed_5b17;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentClass {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalFactors {
    pub class: AgentClass,
    pub target_speed: f64,
    pub gain: f64,
}

impl GlobalFactors {
    fn sample(rng: &mut impl Rng) -> Self {
        Self {
            class: if rng.gen::<bool>() {
                AgentClass::B
            } else {
                AgentClass::A
            },
            target_speed: rng.gen_range(0.3..=1.5),
            gain: rng.gen_range(0.7..=1.3),
        }
    }

    /// Per-channel amplitude pattern of the class: a ramp over channel
    /// groups of four, rising for one class and falling for the other.
    pub fn amplitude_mask(&self, n: usize, contrast: f64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let r = (i % 4) as f64 / 3.0;
                match self.class {
                    AgentClass::A => 1.0 - contrast + contrast * (1.0 - r),
                    AgentClass::B => 1.0 - contrast + contrast * r,
                }
            })
            .collect()
    }

    /// Oscillation frequency of the walk and turn regimes.
    pub fn frequency_hz(&self, base: f64) -> f64 {
        let class_factor = match self.class {
            AgentClass::A => 1.0,
            AgentClass::B => 1.4,
        };
        base * self.target_speed * self.gain * class_factor
    }
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
pub fn stationary_distribution(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..10_000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[j] += pi[i] * p[i][j];
            }
        }
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-15 {
            break;
        }
    }
    pi
}

fn sample_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// One generated recording with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub agents: Vec<FeatureSequence>,
    pub factors: GlobalFactors,
    pub regime: Vec<i32>,
    pub difficulty: Vec<f32>,
    /// `(i, j, d_ij[t])` for every agent pair in multi-agent mode.
    pub distances: Vec<(usize, usize, Vec<f32>)>,
}

/// Channel layout of generated data: observations, actions, validity.
pub fn synthetic_layout(n_actions: usize) -> ChannelLayout {
    let mut names = Vec::with_capacity(2 * n_actions + 1);
    let mut kinds = Vec::with_capacity(2 * n_actions + 1);
    for i in 0..n_actions {
        names.push(format!("obs_{i}"));
        kinds.push(ChannelKind::Linear);
    }
    for i in 0..n_actions {
        names.push(format!("act_{i}"));
        kinds.push(ChannelKind::Linear);
    }
    names.push("valid".into());
    kinds.push(ChannelKind::Validity);
    ChannelLayout::new(names, kinds, (n_actions..2 * n_actions).collect()).expect("synthetic layout is valid")
}

fn regime_path(cfg: &DataConfig, rng: &mut impl Rng) -> Vec<i32> {
    let pi = stationary_distribution(&cfg.transition_matrix);
    let mut state = sample_index(&pi, rng);
    let mut out = Vec::with_capacity(cfg.n_frames);
    while out.len() < cfg.n_frames {
        let n = cfg.dwell_min.min(cfg.n_frames - out.len());
        out.extend(std::iter::repeat(state as i32).take(n));
        state = sample_index(&cfg.transition_matrix[state], rng);
    }
    out
}

/// Reflected mean-reverting walk in [0, 1].
fn difficulty_path(t_len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut d: f64 = rng.gen();
    let mut out = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        out.push(d);
        let eps: f64 = StandardNormal.sample(rng);
        d += 0.02 * eps - 0.002 * (d - 0.5);
        if d < 0.0 {
            d = -d;
        }
        if d > 1.0 {
            d = 2.0 - d;
        }
        d = d.clamp(0.0, 1.0);
    }
    out
}

/// Shared slow latent driving inter-agent distances.
fn social_latent(t_len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut u: f64 = StandardNormal.sample(rng);
    let mut out = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        out.push(u);
        let eps: f64 = StandardNormal.sample(rng);
        u += -0.005 * u + 0.05 * eps;
    }
    out
}

fn agent_actions(
    cfg: &DataConfig,
    factors: &GlobalFactors,
    regime: &[i32],
    difficulty: &[f64],
    offset: Option<&[f64]>,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    let n = cfg.n_actions;
    let t_len = cfg.n_frames;
    let mask = factors.amplitude_mask(n, cfg.class_contrast);
    let freq = factors.frequency_hz(cfg.base_frequency_hz);
    let amp = 0.6 + 0.4 * factors.target_speed;
    let dt = 1.0 / cfg.frame_rate_hz;
    let mut phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let mut colored = vec![0.0f64; n];
    let mut drift_sign = 1.0;
    let mut acts = vec![vec![0.0; t_len]; n];
    for t in 0..t_len {
        phase += 2.0 * PI * freq * dt;
        let r = regime[t];
        if r == 2 && (t == 0 || regime[t - 1] != 2) {
            drift_sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
        let sigma = cfg.base_noise + cfg.difficulty_noise * difficulty[t];
        for i in 0..n {
            let eps: f64 = StandardNormal.sample(rng);
            let wave = (phase + i as f64 * PI / 4.0).sin();
            let e2: f64 = StandardNormal.sample(rng);
            colored[i] = 0.8 * colored[i] + 0.6 * e2;
            let base = match r {
                0 => 0.0,
                1 => amp * mask[i] * wave,
                2 if i + 1 == n => drift_sign * 0.8 + 0.2 * wave,
                2 => 0.6 * amp * mask[i] * wave,
                _ => 1.2 * mask[i] * colored[i],
            };
            let noise = if r == 0 { 0.5 * sigma * eps } else { sigma * eps };
            let extra = if i == 0 { offset.map_or(0.0, |o| o[t]) } else { 0.0 };
            acts[i][t] = (base + noise + extra).clamp(-cfg.max_amplitude, cfg.max_amplitude);
        }
    }
    acts
}

fn features_from_actions(cfg: &DataConfig, acts: &[Vec<f64>], rng: &mut impl Rng) -> FeatureSequence {
    let n = cfg.n_actions;
    let t_len = cfg.n_frames;
    let layout = synthetic_layout(n);
    let mut data = vec![0.0; layout.channels() * t_len];
    for i in 0..n {
        let mut pos = 0.0;
        for t in 0..t_len {
            pos += acts[i][t] / cfg.frame_rate_hz;
            let eps: f64 = StandardNormal.sample(rng);
            data[i * t_len + t] = pos + cfg.observation_noise * eps;
            data[(n + i) * t_len + t] = acts[i][t];
        }
    }
    for t in 0..t_len {
        data[2 * n * t_len + t] = 1.0;
    }
    // keep values representable in the on-disk f32 format
    for v in data.iter_mut() {
        *v = f64::from(*v as f32);
    }
    FeatureSequence::new(layout, t_len, data).expect("consistent sizes")
}

fn sequence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Generates one sequence. Deterministic in `(seed, config)`.
pub fn generate_sequence(seed: u64, cfg: &DataConfig) -> Result<LabeledSequence, ConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(generate_with(&mut rng, cfg))
}

fn generate_with(rng: &mut ChaCha8Rng, cfg: &DataConfig) -> LabeledSequence {
    let factors = GlobalFactors::sample(rng);
    let regime = regime_path(cfg, rng);
    let difficulty = difficulty_path(cfg.n_frames, rng);
    let n_agents = cfg.agents();
    let latent = if cfg.multi_agent {
        Some(social_latent(cfg.n_frames, rng))
    } else {
        None
    };
    let mut agents = Vec::with_capacity(n_agents);
    for a in 0..n_agents {
        let offset: Option<Vec<f64>> = latent
            .as_ref()
            .map(|u| u.iter().map(|&x| x * (a + 1) as f64 / n_agents as f64).collect());
        let acts = agent_actions(cfg, &factors, &regime, &difficulty, offset.as_deref(), rng);
        agents.push(features_from_actions(cfg, &acts, rng));
    }
    let mut distances = Vec::new();
    if let Some(u) = &latent {
        for i in 0..n_agents {
            for j in i + 1..n_agents {
                let gap = (j - i) as f64 / n_agents as f64;
                let d = u.iter().map(|&x| (0.5 + x.abs() * gap) as f32).collect();
                distances.push((i, j, d));
            }
        }
    }
    LabeledSequence {
        agents,
        factors,
        regime,
        difficulty: difficulty.iter().map(|&d| d as f32).collect(),
        distances,
    }
}

/// Sizes of the three splits: floor of each fraction, remainder to the last.
pub fn split_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut sizes: Vec<usize> = fractions.iter().map(|f| (f * n as f64).floor() as usize).collect();
    let assigned: usize = sizes[..sizes.len() - 1].iter().sum();
    let last = sizes.len() - 1;
    sizes[last] = n - assigned.min(n);
    sizes
}

/// Sequence id and split for every index, in index order.
pub fn assign_splits(seed: u64, n: usize, fractions: &[f64]) -> Vec<&'static str> {
    let sizes = split_sizes(n, fractions);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    order.shuffle(&mut rng);
    let mut out = vec![SPLITS[0]; n];
    let mut pos = 0;
    for (s, &size) in sizes.iter().enumerate() {
        for &idx in &order[pos..pos + size] {
            out[idx] = SPLITS[s];
        }
        pos += size;
    }
    out
}

pub fn sequence_id(index: usize) -> String {
    format!("seq{index:05}")
}

/// Converts a generated sequence to the dataset record.
pub fn to_record(id: String, split: &str, s: &LabeledSequence) -> Sequence {
    let mut frame_labels = BTreeMap::new();
    frame_labels.insert("regime".to_string(), LabelSeries::Int(s.regime.clone()));
    frame_labels.insert("difficulty".to_string(), LabelSeries::Float(s.difficulty.clone()));
    for (i, j, d) in &s.distances {
        frame_labels.insert(format!("dist_{i}_{j}"), LabelSeries::Float(d.clone()));
    }
    Sequence {
        id,
        split: split.to_string(),
        agents: s.agents.clone(),
        frame_labels,
    }
}

pub fn synthetic_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            name: "agent_class".into(),
            level: TaskLevel::Sequence,
            kind: TaskKind::Classification,
        },
        TaskSpec {
            name: "target_speed".into(),
            level: TaskLevel::Sequence,
            kind: TaskKind::Regression,
        },
        TaskSpec {
            name: "regime".into(),
            level: TaskLevel::Frame,
            kind: TaskKind::Classification,
        },
        TaskSpec {
            name: "difficulty".into(),
            level: TaskLevel::Frame,
            kind: TaskKind::Regression,
        },
    ]
}

/// Generates `cfg.n_sequences` sequences and writes them under `out`.
pub fn generate_dataset(seed: u64, cfg: &DataConfig, out: &Path, force: bool) -> Result<Manifest, SynthError> {
    cfg.validate()?;
    let writer = DatasetWriter::create(out, force)?;
    let splits = assign_splits(seed, cfg.n_sequences, &cfg.split_fractions);
    let mut entries = Vec::with_capacity(cfg.n_sequences);
    let mut seq_labels = BTreeMap::new();
    for (idx, split) in splits.iter().enumerate() {
        let mut rng = sequence_rng(seed, idx as u64);
        let s = generate_with(&mut rng, cfg);
        let id = sequence_id(idx);
        writer.write_sequence(&to_record(id.clone(), split, &s))?;
        let mut labels = BTreeMap::new();
        labels.insert(
            "agent_class".to_string(),
            match s.factors.class {
                AgentClass::A => 0.0,
                AgentClass::B => 1.0,
            },
        );
        labels.insert("target_speed".to_string(), s.factors.target_speed);
        labels.insert("gain".to_string(), s.factors.gain);
        seq_labels.insert(id.clone(), labels);
        entries.push(SequenceEntry {
            id,
            split: split.to_string(),
            n_frames: cfg.n_frames,
        });
    }
    let mut label_files = vec![
        LabelFile {
            name: "difficulty".into(),
            dtype: LabelDtype::F32,
        },
        LabelFile {
            name: "regime".into(),
            dtype: LabelDtype::I32,
        },
    ];
    for i in 0..cfg.agents() {
        for j in i + 1..cfg.agents() {
            label_files.push(LabelFile {
                name: format!("dist_{i}_{j}"),
                dtype: LabelDtype::F32,
            });
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        frame_rate_hz: cfg.frame_rate_hz,
        n_agents: cfg.agents(),
        channels: synthetic_layout(cfg.n_actions),
        tasks: synthetic_tasks(),
        frame_label_files: label_files,
        sequences: entries,
        sequence_labels: seq_labels,
        generator: Some(serde_json::json!({
            "kind": "synthetic",
            "seed": seed,
            "regimes": REGIMES,
            "config": cfg,
        })),
    };
    writer.finish(&manifest)?;
    Ok(manifest)
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
}
