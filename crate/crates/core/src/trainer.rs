//! Combined objective, anchor batching, optimizer schedule and checkpoints.
//!
//! One optimizer step covers a batch of sequences. Each sequence is encoded
//! in its own graph; per-sequence losses are pre-scaled by the batch totals
//! so the summed gradients equal the gradient of the batch means.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bootstrap::{bootstrap_graph, sample_positives, FixedTargets, PositivePlan};
use crate::config::{Ablation, Alpha, PretrainMode, RunConfig};
use crate::dataset::{DataError, Dataset, Sequence};
use crate::diffcore::{DiffError, Var};
use crate::features::{fit_normalization, valid_prediction_window, ChannelLayout, FeatureError, NormStats};
use crate::hoa::{build_target, fit_binning, BinningSpec, HoaError};
use crate::model::{save_checkpoint, BamsModel, CheckpointError, HeadKind, ModelError, ModelSpec};
use crate::{Adam, Graph, ParamStore, Tensor};

pub const ALPHA_MIN: f64 = 1e-3;
pub const ALPHA_MAX: f64 = 1e3;
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";

const STREAM_ALPHA: u64 = 1;
const STREAM_SAMPLING: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite {component} at epoch {epoch}, step {step}")]
    NonFinite {
        component: String,
        epoch: usize,
        step: usize,
    },
    #[error("no training sequences in the selected split")]
    NoSequences,
    #[error("no sequence has a valid anchor (need frames after the warm-up with a valid prediction window)")]
    NoAnchors,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Hoa(#[from] HoaError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {msg}")]
    Output { path: PathBuf, msg: String },
}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        TrainError::Model(ModelError::Diff(e))
    }
}

/// One agent of a training sequence.
#[derive(Clone, Debug)]
pub struct AgentData {
    /// Normalized `[C x T]` encoder input.
    pub input: Tensor,
    pub validity: Vec<bool>,
    /// Raw action series, one per action channel.
    pub actions: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct TrainSequence {
    pub id: String,
    pub agents: Vec<AgentData>,
    /// `(i, j, d_ij / scale)` per agent pair.
    pub distances: Vec<(usize, usize, Vec<f64>)>,
    /// Frames usable as anchors.
    pub candidates: Vec<usize>,
}

/// Preprocessed pretraining set with the statistics fitted on it.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub sequences: Vec<TrainSequence>,
    pub stats: NormStats,
    pub binning: BinningSpec,
    pub layout: ChannelLayout,
    pub frame_rate_hz: f64,
    /// Divisor applied to pairwise distance targets.
    pub distance_scale: f64,
}

fn warmup_frames(cfg: &RunConfig, fps: f64) -> usize {
    (cfg.trainer.warmup_exclusion_s * fps).ceil() as usize
}

impl TrainData {
    /// Loads the pretraining split: `train` only in inductive mode, every
    /// sequence in transductive mode.
    pub fn from_dataset(ds: &Dataset, cfg: &RunConfig) -> Result<Self, TrainError> {
        let m = ds.manifest();
        let ids: Vec<String> = match cfg.trainer.mode {
            PretrainMode::Inductive => m.ids_in_split(&cfg.eval.train_split),
            PretrainMode::Transductive => m.sequences.iter().map(|s| s.id.clone()).collect(),
        };
        let seqs = ids
            .iter()
            .map(|id| ds.load_sequence(id))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_sequences(&seqs, m.frame_rate_hz, cfg)
    }

    pub fn from_sequences(seqs: &[Sequence], frame_rate_hz: f64, cfg: &RunConfig) -> Result<Self, TrainError> {
        let first = seqs.first().ok_or(TrainError::NoSequences)?;
        let layout = first.agents[0].layout.clone();
        let stats = fit_normalization(seqs.iter().flat_map(|s| s.agents.iter()))?;
        let n_act = layout.action_channels.len();
        let mut pooled = vec![Vec::new(); n_act];
        for s in seqs {
            for a in &s.agents {
                let valid = a.validity();
                for (k, series) in a.actions().iter().enumerate() {
                    pooled[k].extend(series.iter().zip(&valid).filter(|(_, &v)| v).map(|(x, _)| *x));
                }
            }
        }
        let binning = fit_binning(&pooled, cfg.hoa.bins, cfg.hoa.quantiles)?;

        let mut all_d = Vec::new();
        for s in seqs {
            for (name, series) in &s.frame_labels {
                if name.starts_with("dist_") {
                    all_d.extend(series.to_f64());
                }
            }
        }
        let distance_scale = if all_d.len() > 1 {
            let mean = all_d.iter().sum::<f64>() / all_d.len() as f64;
            let var = all_d.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / all_d.len() as f64;
            var.sqrt().max(1e-6)
        } else {
            1.0
        };

        let warmup = warmup_frames(cfg, frame_rate_hz);
        let horizon = cfg.hoa.horizon;
        let seq_horizon = match cfg.trainer.ablation {
            Ablation::Hoa => cfg.trainer.sequential_horizon,
            _ => 0,
        };
        let mut sequences = Vec::with_capacity(seqs.len());
        for s in seqs {
            let mut agents = Vec::with_capacity(s.agents.len());
            for a in &s.agents {
                let norm = crate::features::apply_normalization(a, &stats)?;
                agents.push(AgentData {
                    input: Tensor::new(vec![norm.channels(), norm.n_frames], norm.data)?,
                    validity: a.validity(),
                    actions: a.actions().iter().map(|x| x.to_vec()).collect(),
                });
            }
            let t_len = s.n_frames();
            let candidates = (warmup..t_len)
                .filter(|&t| {
                    agents.iter().all(|ag| {
                        ag.validity[t]
                            && valid_prediction_window(&ag.validity, t, horizon)
                            && (seq_horizon == 0
                                || (t + seq_horizon < t_len && ag.validity[t + 1..=t + seq_horizon].iter().all(|&v| v)))
                    })
                })
                .collect();
            let mut distances = Vec::new();
            for i in 0..agents.len() {
                for j in i + 1..agents.len() {
                    if let Some(series) = s.frame_labels.get(&format!("dist_{i}_{j}")) {
                        distances.push((i, j, series.to_f64().iter().map(|d| d / distance_scale).collect()));
                    }
                }
            }
            sequences.push(TrainSequence {
                id: s.id.clone(),
                agents,
                distances,
                candidates,
            });
        }
        if sequences.iter().all(|s| s.candidates.is_empty()) {
            return Err(TrainError::NoAnchors);
        }
        Ok(Self {
            sequences,
            stats,
            binning,
            layout,
            frame_rate_hz,
            distance_scale,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.sequences.first().map_or(1, |s| s.agents.len())
    }

    pub fn has_distances(&self) -> bool {
        self.sequences.iter().any(|s| !s.distances.is_empty())
    }
}

/// Anchors, positives and histogram targets for one sequence in one step.
#[derive(Clone, Debug)]
pub struct SequenceSample {
    pub seq: usize,
    pub anchors: Vec<usize>,
    /// Per agent.
    pub plans: Vec<PositivePlan>,
    /// Per agent, `[B x (N K)]`.
    pub targets: Vec<Vec<f64>>,
}

/// Draws up to `anchors_per_sequence` anchors without replacement and their
/// positives and targets.
pub fn sample_sequence<R: Rng>(rng: &mut R, data: &TrainData, seq: usize, cfg: &RunConfig) -> SequenceSample {
    let s = &data.sequences[seq];
    let n = s.candidates.len();
    let k = cfg.trainer.anchors_per_sequence.min(n);
    let mut idx = sample(rng, n, k).into_vec();
    idx.sort_unstable();
    let anchors: Vec<usize> = idx.iter().map(|&i| s.candidates[i]).collect();
    let mut plans = Vec::with_capacity(s.agents.len());
    let mut targets = Vec::with_capacity(s.agents.len());
    for ag in &s.agents {
        plans.push(sample_positives(rng, &ag.validity, &anchors, cfg.bootstrap.window));
        let acts: Vec<&[f64]> = ag.actions.iter().map(|a| a.as_slice()).collect();
        let mut t = Vec::with_capacity(anchors.len() * acts.len() * data.binning.bins);
        for &a in &anchors {
            t.extend(build_target(&acts, &ag.validity, a, cfg.hoa.horizon, &data.binning).h);
        }
        targets.push(t);
    }
    SequenceSample {
        seq,
        anchors,
        plans,
        targets,
    }
}

/// Per-term scaling of one sequence's contribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// `1 / anchors` over the batch (per agent).
    pub prediction: f64,
    /// `1 / plan anchors` over the batch.
    pub bootstrap: f64,
    /// `1 / pair anchors` over the batch.
    pub aux: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn for_batch(samples: &[SequenceSample], data: &TrainData, alpha: f64, beta: f64) -> Self {
        let anchors: usize = samples.iter().map(|s| s.anchors.len() * s.plans.len()).sum();
        let plan: usize = samples
            .iter()
            .map(|s| s.plans.iter().map(PositivePlan::len).sum::<usize>())
            .sum();
        let pairs: usize = samples
            .iter()
            .map(|s| s.anchors.len() * data.sequences[s.seq].distances.len())
            .sum();
        let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
        Self {
            prediction: inv(anchors),
            bootstrap: inv(plan),
            aux: inv(pairs),
            alpha,
            beta,
        }
    }
}

/// Loss nodes of one sequence. Component nodes already carry the batch
/// normalization; `total = prediction + alpha (short + long) + beta aux`.
pub struct LossVars {
    pub total: Var,
    pub prediction: Var,
    pub short: Var,
    pub long: Var,
    pub aux: Option<Var>,
    /// Histogram outputs per agent (histogram head only).
    pub probs: Vec<Var>,
}

/// Builds the full loss of one sampled sequence. With `fixed` the bootstrap
/// targets are the given constants (one per agent) instead of live
/// stop-gradient embeddings.
#[allow(clippy::too_many_arguments)]
pub fn sequence_loss_graph(
    model: &BamsModel,
    g: &mut Graph,
    store: &ParamStore,
    seq: &TrainSequence,
    smp: &SequenceSample,
    w: &LossWeights,
    fixed: Option<&[FixedTargets]>,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<LossVars, TrainError> {
    let mut prediction = g.input(Tensor::scalar(0.0));
    let mut short = g.input(Tensor::scalar(0.0));
    let mut long = g.input(Tensor::scalar(0.0));
    let mut probs = Vec::new();
    let mut z_anchor = Vec::with_capacity(seq.agents.len());
    for (a, ag) in seq.agents.iter().enumerate() {
        let x = g.input(ag.input.clone());
        let enc = model.encode_graph(g, store, x, dropout.as_deref_mut())?;
        if smp.anchors.is_empty() {
            continue;
        }
        let z = model.z_rows(g, &enc, &smp.anchors)?;
        let term = match model.spec.head {
            HeadKind::Histogram => {
                let p = model.hoa_probs_graph(g, store, z)?;
                probs.push(p);
                let mask = vec![true; smp.anchors.len()];
                g.hoa_loss(p, &smp.targets[a], &mask, model.spec.bins, w.prediction)?
            }
            HeadKind::Sequential { horizon } => {
                let out = model.sequential_graph(g, store, z)?;
                let target = sequential_targets(&ag.input, &model.layout.action_channels, &smp.anchors, horizon);
                let n = model.spec.n_actions * horizon;
                g.sq_err_sum(out, &target, w.prediction / n as f64)?
            }
        };
        prediction = g.add(prediction, term)?;
        let (s, l) = bootstrap_graph(model, g, store, &enc, &smp.plans[a], w.bootstrap, fixed.map(|f| &f[a]))?;
        short = g.add(short, s)?;
        long = g.add(long, l)?;
        z_anchor.push(z);
    }
    let aux = if model.has_distance_head() && !seq.distances.is_empty() && !smp.anchors.is_empty() {
        let mut acc = g.input(Tensor::scalar(0.0));
        for (i, j, d) in &seq.distances {
            let pred = model.distance_graph(g, store, z_anchor[*i], z_anchor[*j])?;
            let target: Vec<f64> = smp.anchors.iter().map(|&t| d[t]).collect();
            let term = g.sq_err_sum(pred, &target, w.aux)?;
            acc = g.add(acc, term)?;
        }
        Some(acc)
    } else {
        None
    };
    let boot = g.add(short, long)?;
    let boot = g.scale(boot, w.alpha);
    let mut total = g.add(prediction, boot)?;
    if let Some(a) = aux {
        let a = g.scale(a, w.beta);
        total = g.add(total, a)?;
    }
    Ok(LossVars {
        total,
        prediction,
        short,
        long,
        aux,
        probs,
    })
}

/// Frame-major `[B x (horizon N)]` targets: the normalized action channels
/// at `t + 1 ..= t + horizon` for every anchor.
pub fn sequential_targets(input: &Tensor, action_channels: &[usize], anchors: &[usize], horizon: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(anchors.len() * horizon * action_channels.len());
    for &t in anchors {
        for h in 1..=horizon {
            for &c in action_channels {
                out.push(input.get2(c, t + h));
            }
        }
    }
    out
}

/// Mean squared error of sequential predictions against the true next frames.
pub fn sequential_prediction_loss(predicted: &[f64], target: &[f64]) -> f64 {
    if target.is_empty() {
        return 0.0;
    }
    predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / target.len() as f64
}

/// Per-sequence component values, summed over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub prediction: f64,
    pub short: f64,
    pub long: f64,
    pub aux: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.prediction += o.prediction;
        self.short += o.short;
        self.long += o.long;
        self.aux += o.aux;
    }

    fn check(&self, epoch: usize, step: usize) -> Result<(), TrainError> {
        for (name, v) in [
            ("total loss", self.total),
            ("prediction loss", self.prediction),
            ("short bootstrap loss", self.short),
            ("long bootstrap loss", self.long),
            ("auxiliary distance loss", self.aux),
        ] {
            if !v.is_finite() {
                return Err(TrainError::NonFinite {
                    component: name.into(),
                    epoch,
                    step,
                });
            }
        }
        Ok(())
    }
}

/// Hooks for inspecting training as it runs.
pub trait TrainObserver {
    fn on_histograms(&mut self, _targets: &[f64], _probs: &[f64], _bins: usize) {}
    fn on_step(&mut self, _record: &StepRecord) {}
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Effective rate of the bootstrap predictor parameters.
    pub predictor_lr: f64,
    pub loss: LossParts,
    pub alpha: f64,
    pub grad_norm: f64,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub prediction_loss: f64,
    pub boot_short: f64,
    pub boot_long: f64,
    pub aux_loss: f64,
    pub alpha: f64,
    pub lr: f64,
    pub predictor_lr: f64,
    pub grad_norm: f64,
    pub seconds: f64,
    pub empty_batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.epochs {
            w.serialize(r).expect("record serializes");
        }
        if self.epochs.is_empty() {
            w.write_record([
                "epoch",
                "loss",
                "prediction_loss",
                "boot_short",
                "boot_long",
                "aux_loss",
                "alpha",
                "lr",
                "predictor_lr",
                "grad_norm",
                "seconds",
                "empty_batches",
            ])
            .expect("header");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Builds the initial model for a training run.
pub fn initial_model(cfg: &RunConfig, data: &TrainData) -> Result<BamsModel, TrainError> {
    let mut spec = ModelSpec::new(
        cfg.model.clone(),
        data.layout.channels(),
        data.layout.action_channels.len(),
        cfg.hoa.bins,
        cfg.seed,
    )
    .with_ablation(cfg.trainer.ablation, cfg.trainer.sequential_horizon);
    spec.distance_head = data.n_agents() > 1 && data.has_distances();
    Ok(BamsModel::new(
        spec,
        data.binning.clone(),
        data.stats.clone(),
        data.layout.clone(),
    )?)
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn usable(data: &TrainData) -> Vec<usize> {
    (0..data.sequences.len())
        .filter(|&i| !data.sequences[i].candidates.is_empty())
        .collect()
}

fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Forward-only component values of one batch.
pub fn batch_components(
    model: &BamsModel,
    data: &TrainData,
    samples: &[SequenceSample],
    alpha: f64,
    beta: f64,
) -> Result<LossParts, TrainError> {
    let w = LossWeights::for_batch(samples, data, alpha, beta);
    let mut parts = LossParts::default();
    for smp in samples {
        let mut g = Graph::new();
        let vars = sequence_loss_graph(
            model,
            &mut g,
            &model.store,
            &data.sequences[smp.seq],
            smp,
            &w,
            None,
            None,
        )?;
        parts.add(&read_parts(&g, &vars));
    }
    Ok(parts)
}

fn read_parts(g: &Graph, v: &LossVars) -> LossParts {
    LossParts {
        total: g.scalar(v.total),
        prediction: g.scalar(v.prediction),
        short: g.scalar(v.short),
        long: g.scalar(v.long),
        aux: v.aux.map_or(0.0, |a| g.scalar(a)),
    }
}

/// `alpha = mean(L_t) / mean(L_short + L_long)` over probe batches of the
/// initial model, clamped to `[1e-3, 1e3]`; 1 when the bootstrap loss is 0.
pub fn alpha_from_probes(prediction: &[f64], bootstrap: &[f64]) -> f64 {
    let mp = prediction.iter().sum::<f64>() / prediction.len().max(1) as f64;
    let mb = bootstrap.iter().sum::<f64>() / bootstrap.len().max(1) as f64;
    if !(mb > 0.0) {
        log::warn!("bootstrap loss is zero on the probe batches; using alpha = 1");
        return 1.0;
    }
    (mp / mb).clamp(ALPHA_MIN, ALPHA_MAX)
}

/// Concrete alpha for a run: forced to 0 for the bootstrap ablation, the
/// configured value when fixed, otherwise probed.
pub fn resolve_alpha(cfg: &RunConfig, model: &BamsModel, data: &TrainData) -> Result<f64, TrainError> {
    if cfg.trainer.ablation == Ablation::Bootstrap {
        return Ok(0.0);
    }
    match cfg.trainer.alpha {
        Alpha::Fixed(a) => Ok(a),
        Alpha::Auto => {
            let mut rng = rng_stream(cfg.seed, STREAM_ALPHA);
            let mut order = usable(data);
            let mut pred = Vec::new();
            let mut boot = Vec::new();
            for _ in 0..cfg.trainer.alpha_probe_batches {
                order.shuffle(&mut rng);
                let batch = &order[..cfg.trainer.batch_size.min(order.len())];
                let samples: Vec<_> = batch.iter().map(|&s| sample_sequence(&mut rng, data, s, cfg)).collect();
                let p = batch_components(model, data, &samples, 1.0, 0.0)?;
                pred.push(p.prediction);
                boot.push(p.short + p.long);
            }
            Ok(alpha_from_probes(&pred, &boot))
        }
    }
}

pub struct TrainOutput {
    pub model: BamsModel,
    pub log: TrainLog,
    pub alpha: f64,
}

fn checkpoint_metadata(cfg: &RunConfig, data: &TrainData, alpha: f64, epoch: usize) -> serde_json::Value {
    serde_json::json!({
        "epoch": epoch,
        "alpha": alpha,
        "seed": cfg.seed,
        "mode": cfg.trainer.mode,
        "ablation": cfg.trainer.ablation,
        "distance_scale": data.distance_scale,
        "frame_rate_hz": data.frame_rate_hz,
    })
}

fn predictor_multiplier(model: &BamsModel) -> f64 {
    model
        .store
        .iter()
        .find(|(_, p)| p.name.starts_with("q_short."))
        .map_or(1.0, |(_, p)| p.lr_multiplier)
}

/// Runs the full schedule. Writes intermediate checkpoints, the final
/// checkpoint and the log under `out` when given.
pub fn train(
    cfg: &RunConfig,
    data: &TrainData,
    out: Option<&Path>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutput, TrainError> {
    let mut model = initial_model(cfg, data)?;
    let alpha = resolve_alpha(cfg, &model, data)?;
    let beta = cfg.trainer.aux_weight;
    log::info!("alpha = {alpha}");
    let mut adam = Adam::new(&model.store, cfg.trainer.weight_decay);
    let mut rng = rng_stream(cfg.seed, STREAM_SAMPLING);
    let mut drop_rng = rng_stream(cfg.seed, STREAM_DROPOUT);
    let mut order = usable(data);
    let mut log = TrainLog::default();
    let n_params = model.store.len();
    let pmult = predictor_multiplier(&model);
    let mut step = 0usize;
    for epoch in 1..=cfg.trainer.epochs {
        let started = Instant::now();
        let lr = cfg.trainer.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let visit = match cfg.trainer.max_sequences_per_epoch {
            0 => order.len(),
            m => m.min(order.len()),
        };
        let mut sums = LossParts::default();
        let mut grad_norm_sum = 0.0;
        let mut n_batches = 0usize;
        let mut empty = 0usize;
        for batch in batches(&order[..visit], cfg.trainer.batch_size) {
            step += 1;
            let samples: Vec<_> = batch.iter().map(|&s| sample_sequence(&mut rng, data, s, cfg)).collect();
            if samples.iter().all(|s| s.anchors.is_empty()) {
                empty += 1;
                continue;
            }
            let w = LossWeights::for_batch(&samples, data, alpha, beta);
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_params];
            let mut parts = LossParts::default();
            for smp in &samples {
                let mut g = Graph::new();
                let seq = &data.sequences[smp.seq];
                let vars = sequence_loss_graph(&model, &mut g, &model.store, seq, smp, &w, None, Some(&mut drop_rng))?;
                let p = read_parts(&g, &vars);
                p.check(epoch, step)?;
                parts.add(&p);
                for (a, &pv) in vars.probs.iter().enumerate() {
                    observer.on_histograms(&smp.targets[a], g.value(pv).data(), model.spec.bins);
                }
                let gr = g.backward(vars.total)?.param_grads(n_params);
                for (acc, gi) in grads.iter_mut().zip(gr) {
                    match (acc.as_mut(), gi) {
                        (Some(a), Some(gv)) => a.iter_mut().zip(&gv).for_each(|(x, y)| *x += y),
                        (None, Some(gv)) => *acc = Some(gv),
                        _ => {}
                    }
                }
            }
            let grad_norm = grads
                .iter()
                .flatten()
                .flat_map(|g| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if !grad_norm.is_finite() {
                return Err(TrainError::NonFinite {
                    component: "gradient".into(),
                    epoch,
                    step,
                });
            }
            adam.step(&mut model.store, &grads, lr)
                .map_err(|_| TrainError::NonFinite {
                    component: "gradient".into(),
                    epoch,
                    step,
                })?;
            observer.on_step(&StepRecord {
                epoch,
                step,
                lr,
                predictor_lr: lr * pmult,
                loss: parts,
                alpha,
                grad_norm,
            });
            sums.add(&parts);
            grad_norm_sum += grad_norm;
            n_batches += 1;
        }
        let nb = n_batches.max(1) as f64;
        log.epochs.push(EpochRecord {
            epoch,
            loss: sums.total / nb,
            prediction_loss: sums.prediction / nb,
            boot_short: sums.short / nb,
            boot_long: sums.long / nb,
            aux_loss: sums.aux / nb,
            alpha,
            lr,
            predictor_lr: lr * pmult,
            grad_norm: grad_norm_sum / nb,
            seconds: started.elapsed().as_secs_f64(),
            empty_batches: empty,
        });
        log::info!(
            "epoch {epoch}: loss {:.5} (prediction {:.5}, short {:.5}, long {:.5}, aux {:.5})",
            sums.total / nb,
            sums.prediction / nb,
            sums.short / nb,
            sums.long / nb,
            sums.aux / nb
        );
        if let Some(dir) = out {
            let every = cfg.trainer.checkpoint_every;
            if every > 0 && epoch % every == 0 && epoch < cfg.trainer.epochs {
                let path = dir.join(format!("checkpoint_epoch{epoch:04}.ckpt"));
                save_checkpoint(&model, &path, checkpoint_metadata(cfg, data, alpha, epoch))?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(
            &model,
            &dir.join(FINAL_CHECKPOINT),
            checkpoint_metadata(cfg, data, alpha, cfg.trainer.epochs),
        )?;
        let path = dir.join(TRAIN_LOG);
        std::fs::write(&path, log.to_csv()).map_err(|e| TrainError::Output {
            path: path.clone(),
            msg: e.to_string(),
        })?;
    }
    Ok(TrainOutput { model, log, alpha })
}
