//! Short- and long-term causal TCN encoders, the histogram predictor, the two
//! bootstrap predictors and the optional pairwise distance head.

mod checkpoint;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_VERSION,
};
pub use layers::{Mlp, Tcn};

use crate::config::{Ablation, EncoderSpec, ModelConfig};
use crate::diffcore::{DiffError, Var};
use crate::features::{apply_normalization, ChannelLayout, FeatureSequence, NormStats};
use crate::hoa::BinningSpec;
use crate::{Graph, ParamStore, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("channel mismatch: model expects {expected:?}, input has {found:?}")]
    Channels { expected: Vec<String>, found: Vec<String> },
    #[error("{0}")]
    Invalid(String),
}

/// Frames that can influence one output frame:
/// `1 + sum_i 2 (k - 1) r^i` for two convolutions per block.
pub fn receptive_field(spec: &EncoderSpec) -> usize {
    1 + (0..spec.block_channels.len())
        .map(|i| 2 * (spec.kernel_size - 1) * spec.dilation_base.pow(i as u32))
        .sum::<usize>()
}

/// Which training target the head emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `[N x K]` histograms of future actions.
    Histogram,
    /// Raw next `horizon` action frames, `[horizon x N]`.
    Sequential { horizon: usize },
}

/// Everything needed to rebuild a model with identical parameter layout.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub in_channels: usize,
    pub n_actions: usize,
    pub bins: usize,
    /// One encoder spanning the long receptive field instead of two.
    pub single_encoder: bool,
    pub head: HeadKind,
    pub distance_head: bool,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(config: ModelConfig, in_channels: usize, n_actions: usize, bins: usize, seed: u64) -> Self {
        Self {
            config,
            in_channels,
            n_actions,
            bins,
            single_encoder: false,
            head: HeadKind::Histogram,
            distance_head: false,
            seed,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation, sequential_horizon: usize) -> Self {
        match ablation {
            Ablation::Hoa => {
                self.head = HeadKind::Sequential {
                    horizon: sequential_horizon,
                }
            }
            Ablation::Multiscale => self.single_encoder = true,
            Ablation::None | Ablation::Bootstrap => {}
        }
        self
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.short.embedding_dim + self.config.long.embedding_dim
    }

    /// Encoder spec of the single-encoder variant: long dilations, output
    /// width of the full embedding.
    pub fn single_spec(&self) -> EncoderSpec {
        let mut spec = self.config.long.clone();
        let d = self.embedding_dim();
        *spec.block_channels.last_mut().expect("validated non-empty") = d;
        spec.embedding_dim = d;
        spec
    }

    fn head_outputs(&self) -> usize {
        match self.head {
            HeadKind::Histogram => self.n_actions * self.bins,
            HeadKind::Sequential { horizon } => self.n_actions * horizon,
        }
    }
}

/// Encoder outputs inside a graph, channel-major `[D x T]`.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub short: Var,
    pub long: Var,
    /// Single-encoder variant: `short` and `long` are the same full map.
    pub shared: bool,
}

/// Per-frame embeddings, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub n_frames: usize,
    /// `[T x D_s]`.
    pub short: Vec<f64>,
    /// `[T x D_l]`.
    pub long: Vec<f64>,
    pub short_dim: usize,
    pub long_dim: usize,
}

impl Embedding {
    /// `[T x (D_s + D_l)]` concatenation.
    pub fn full(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_frames * (self.short_dim + self.long_dim));
        for t in 0..self.n_frames {
            out.extend_from_slice(&self.short[t * self.short_dim..(t + 1) * self.short_dim]);
            out.extend_from_slice(&self.long[t * self.long_dim..(t + 1) * self.long_dim]);
        }
        out
    }

    pub fn full_dim(&self) -> usize {
        self.short_dim + self.long_dim
    }
}

fn frame_major(map: &Tensor, rows: std::ops::Range<usize>) -> Vec<f64> {
    let t = map.dim(1);
    let d = rows.len();
    let mut out = vec![0.0; t * d];
    for (k, r) in rows.enumerate() {
        for (frame, &v) in map.row(r).iter().enumerate() {
            out[frame * d + k] = v;
        }
    }
    out
}

/// The full network plus the preprocessing state it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct BamsModel {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub binning: BinningSpec,
    pub stats: NormStats,
    pub layout: ChannelLayout,
    short: Option<Tcn>,
    long: Tcn,
    head: Mlp,
    q_short: Mlp,
    q_long: Mlp,
    distance: Option<Mlp>,
}

impl BamsModel {
    /// Builds a freshly initialized model. Same spec and seed give
    /// bit-identical parameters.
    pub fn new(
        spec: ModelSpec,
        binning: BinningSpec,
        stats: NormStats,
        layout: ChannelLayout,
    ) -> Result<Self, ModelError> {
        spec.config.validate().map_err(|e| ModelError::Invalid(e.to_string()))?;
        if layout.channels() != spec.in_channels {
            return Err(ModelError::Invalid(format!(
                "layout has {} channels, spec expects {}",
                layout.channels(),
                spec.in_channels
            )));
        }
        if binning.channels() != spec.n_actions || binning.bins != spec.bins {
            return Err(ModelError::Invalid("binning does not match the action channels".into()));
        }
        let cfg = &spec.config;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let (short, long) = if spec.single_encoder {
            (
                None,
                Tcn::build(&mut store, "encoder", spec.in_channels, &spec.single_spec(), &mut rng)?,
            )
        } else {
            (
                Some(Tcn::build(&mut store, "short", spec.in_channels, &cfg.short, &mut rng)?),
                Tcn::build(&mut store, "long", spec.in_channels, &cfg.long, &mut rng)?,
            )
        };
        let d = spec.embedding_dim();
        let head = Mlp::build(
            &mut store,
            "predictor",
            d,
            cfg.predictor_hidden,
            cfg.predictor_layers,
            spec.head_outputs(),
            1.0,
            &mut rng,
        )?;
        let (qs_in, ql_in) = if spec.single_encoder {
            (d, d)
        } else {
            (cfg.short.embedding_dim, cfg.long.embedding_dim)
        };
        let mult = cfg.predictor_lr_multiplier;
        let q_short = Mlp::build(
            &mut store,
            "q_short",
            qs_in,
            cfg.bootstrap_hidden,
            cfg.bootstrap_layers,
            qs_in,
            mult,
            &mut rng,
        )?;
        let q_long = Mlp::build(
            &mut store,
            "q_long",
            ql_in,
            cfg.bootstrap_hidden,
            cfg.bootstrap_layers,
            ql_in,
            mult,
            &mut rng,
        )?;
        let distance = if spec.distance_head {
            Some(Mlp::build(
                &mut store,
                "distance",
                2 * d,
                cfg.distance_hidden,
                2,
                1,
                1.0,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            spec,
            store,
            binning,
            stats,
            layout,
            short,
            long,
            head,
            q_short,
            q_long,
            distance,
        })
    }

    pub fn short_dim(&self) -> usize {
        self.spec.config.short.embedding_dim
    }

    pub fn long_dim(&self) -> usize {
        self.spec.config.long.embedding_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim()
    }

    /// Receptive fields of the short and long paths.
    pub fn receptive_fields(&self) -> (usize, usize) {
        match &self.short {
            Some(s) => (receptive_field(s.spec()), receptive_field(self.long.spec())),
            None => {
                let rf = receptive_field(self.long.spec());
                (rf, rf)
            }
        }
    }

    /// Checks channel names and normalizes with the stored statistics,
    /// giving the `[C x T]` encoder input.
    pub fn prepare(&self, features: &FeatureSequence) -> Result<Tensor, ModelError> {
        if features.layout.names != self.layout.names {
            return Err(ModelError::Channels {
                expected: self.layout.names.clone(),
                found: features.layout.names.clone(),
            });
        }
        let normalized = apply_normalization(features, &self.stats).map_err(|e| ModelError::Invalid(e.to_string()))?;
        Ok(Tensor::new(
            vec![normalized.channels(), normalized.n_frames],
            normalized.data,
        )?)
    }

    /// Runs the encoders on a prepared `[C x T]` input. Dropout is active
    /// only when `dropout_rng` is given.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncodedVars, ModelError> {
        let c = g.value(input).dim(0);
        if c != self.spec.in_channels {
            return Err(ModelError::Invalid(format!(
                "encoder input has {c} channels, model expects {}",
                self.spec.in_channels
            )));
        }
        match &self.short {
            Some(short) => {
                let s = short.forward(g, store, input, dropout_rng.as_deref_mut())?;
                let l = self.long.forward(g, store, input, dropout_rng)?;
                Ok(EncodedVars {
                    short: s,
                    long: l,
                    shared: false,
                })
            }
            None => {
                let z = self.long.forward(g, store, input, dropout_rng)?;
                Ok(EncodedVars {
                    short: z,
                    long: z,
                    shared: true,
                })
            }
        }
    }

    /// Inference-mode embeddings of a prepared input.
    pub fn encode(&self, input: &Tensor) -> Result<Embedding, ModelError> {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let enc = self.encode_graph(&mut g, &self.store, x, None)?;
        let (ds, dl) = (self.short_dim(), self.long_dim());
        let (short, long) = if enc.shared {
            let z = g.value(enc.short);
            (frame_major(z, 0..ds), frame_major(z, ds..ds + dl))
        } else {
            (
                frame_major(g.value(enc.short), 0..ds),
                frame_major(g.value(enc.long), 0..dl),
            )
        };
        Ok(Embedding {
            n_frames: input.dim(1),
            short,
            long,
            short_dim: ds,
            long_dim: dl,
        })
    }

    /// Normalizes raw features and encodes them.
    pub fn embed(&self, features: &FeatureSequence) -> Result<Embedding, ModelError> {
        self.encode(&self.prepare(features)?)
    }

    /// Full embedding rows `[B x D]` at the given frames.
    pub fn z_rows(&self, g: &mut Graph, enc: &EncodedVars, frames: &[usize]) -> Result<Var, ModelError> {
        if enc.shared {
            return Ok(g.gather_columns(enc.short, frames)?);
        }
        let s = g.gather_columns(enc.short, frames)?;
        let l = g.gather_columns(enc.long, frames)?;
        Ok(g.concat_cols(s, l)?)
    }

    /// Histogram predictions `[B x (N K)]`, each group of `K` softmax-normalized.
    pub fn hoa_probs_graph(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var, ModelError> {
        if self.spec.head != HeadKind::Histogram {
            return Err(ModelError::Invalid("model was built with the sequential head".into()));
        }
        let logits = self.head.forward(g, store, z)?;
        Ok(g.group_softmax(logits, self.spec.bins)?)
    }

    /// Sequential-prediction head output `[B x (horizon N)]`, frame-major.
    pub fn sequential_graph(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var, ModelError> {
        if !matches!(self.spec.head, HeadKind::Sequential { .. }) {
            return Err(ModelError::Invalid("model was built with the histogram head".into()));
        }
        Ok(self.head.forward(g, store, z)?)
    }

    pub fn q_short_graph(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var, ModelError> {
        Ok(self.q_short.forward(g, store, z)?)
    }

    pub fn q_long_graph(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var, ModelError> {
        Ok(self.q_long.forward(g, store, z)?)
    }

    pub fn has_distance_head(&self) -> bool {
        self.distance.is_some()
    }

    /// `softplus(h([z_i + z_j, |z_i - z_j|]))`, shape `[B x 1]`.
    pub fn distance_graph(&self, g: &mut Graph, store: &ParamStore, zi: Var, zj: Var) -> Result<Var, ModelError> {
        let head = self
            .distance
            .as_ref()
            .ok_or_else(|| ModelError::Invalid("distance head requires a multi-agent model".into()))?;
        let sum = g.add(zi, zj)?;
        let diff = g.sub(zi, zj)?;
        let adiff = g.abs(diff);
        let input = g.concat_cols(sum, adiff)?;
        let out = head.forward(g, store, input)?;
        Ok(g.softplus(out))
    }

    /// Histogram predictions `[B x N x K]` for embedding rows `[B x D]`.
    pub fn predict_hoa(&self, z: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let p = self.hoa_probs_graph(&mut g, &self.store, zv)?;
        let b = z.dim(0);
        Ok(g.value(p)
            .clone()
            .reshape(vec![b, self.spec.n_actions, self.spec.bins])?)
    }

    /// Pairwise distance estimate for single embedding vectors.
    pub fn predict_distance(&self, zi: &[f64], zj: &[f64]) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let a = g.input(Tensor::new(vec![1, zi.len()], zi.to_vec())?);
        let b = g.input(Tensor::new(vec![1, zj.len()], zj.to_vec())?);
        let d = self.distance_graph(&mut g, &self.store, a, b)?;
        Ok(g.scalar(d))
    }

    /// Names of parameters updated with the predictor learning-rate multiplier.
    pub fn predictor_params(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("q_short.") || p.name.starts_with("q_long."))
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn head_mlp(&self) -> &Mlp {
        &self.head
    }
}
