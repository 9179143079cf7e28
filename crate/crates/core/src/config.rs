//! Run configuration: one document with data, model, hoa, bootstrap, trainer
//! and eval sections. Unknown keys are rejected and every field has a
//! default, so a resolved copy can be written next to any output.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub hoa: HoaConfig,
    pub bootstrap: BootstrapConfig,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            hoa: HoaConfig::default(),
            bootstrap: BootstrapConfig::default(),
            trainer: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.data.validate()?;
        self.model.validate()?;
        self.hoa.validate()?;
        self.bootstrap.validate()?;
        self.trainer.validate()?;
        self.eval.validate()
    }
}

/// Synthetic generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_sequences: usize,
    pub n_frames: usize,
    pub n_actions: usize,
    pub frame_rate_hz: f64,
    /// Train, public test, private test.
    pub split_fractions: Vec<f64>,
    /// Minimum regime segment length in frames.
    pub dwell_min: usize,
    /// Row-stochastic regime transition matrix (idle, walk, turn, burst).
    pub transition_matrix: Vec<Vec<f64>>,
    pub max_amplitude: f64,
    pub base_frequency_hz: f64,
    /// Spread of the per-channel class amplitude mask, in (0, 1].
    pub class_contrast: f64,
    pub base_noise: f64,
    /// Added to the noise std at difficulty 1.
    pub difficulty_noise: f64,
    pub observation_noise: f64,
    pub multi_agent: bool,
    pub n_agents: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_sequences: 500,
            n_frames: 1000,
            n_actions: 8,
            frame_rate_hz: 30.0,
            split_fractions: vec![0.6, 0.2, 0.2],
            dwell_min: 30,
            transition_matrix: vec![
                vec![0.55, 0.25, 0.10, 0.10],
                vec![0.10, 0.60, 0.20, 0.10],
                vec![0.10, 0.30, 0.50, 0.10],
                vec![0.25, 0.20, 0.10, 0.45],
            ],
            max_amplitude: 3.0,
            base_frequency_hz: 0.5,
            class_contrast: 0.3,
            base_noise: 0.05,
            difficulty_noise: 0.6,
            observation_noise: 0.01,
            multi_agent: false,
            n_agents: 3,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_frames < 2 {
            return Err(invalid("data.n_frames must be >= 2"));
        }
        if self.n_actions == 0 || self.n_sequences == 0 {
            return Err(invalid("data.n_actions and data.n_sequences must be positive"));
        }
        if !(self.frame_rate_hz > 0.0) || !(self.max_amplitude > 0.0) {
            return Err(invalid("data.frame_rate_hz and data.max_amplitude must be positive"));
        }
        if self.dwell_min == 0 {
            return Err(invalid("data.dwell_min must be positive"));
        }
        if self.split_fractions.len() != 3
            || self.split_fractions.iter().any(|f| !(*f >= 0.0))
            || (self.split_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(invalid(
                "data.split_fractions must be three non-negative values summing to 1",
            ));
        }
        let p = &self.transition_matrix;
        if p.len() != 4 || p.iter().any(|r| r.len() != 4) {
            return Err(invalid("data.transition_matrix must be 4x4"));
        }
        for (i, row) in p.iter().enumerate() {
            if row.iter().any(|v| !(*v >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(invalid(format!("data.transition_matrix row {i} is not stochastic")));
            }
        }
        if !irreducible(p) {
            return Err(invalid("data.transition_matrix is not irreducible"));
        }
        if [
            self.base_noise,
            self.difficulty_noise,
            self.observation_noise,
            self.base_frequency_hz,
        ]
        .iter()
        .any(|v| !(*v >= 0.0))
        {
            return Err(invalid("data noise and frequency settings must be non-negative"));
        }
        if !(self.class_contrast > 0.0 && self.class_contrast <= 1.0) {
            return Err(invalid("data.class_contrast must be in (0, 1]"));
        }
        if self.multi_agent && self.n_agents < 2 {
            return Err(invalid("data.n_agents must be >= 2 in multi-agent mode"));
        }
        Ok(())
    }

    pub fn agents(&self) -> usize {
        if self.multi_agent {
            self.n_agents
        } else {
            1
        }
    }
}

fn irreducible(p: &[Vec<f64>]) -> bool {
    let n = p.len();
    (0..n).all(|start| {
        let mut seen = vec![false; n];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if p[i][j] > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.iter().all(|&s| s)
    })
}

/// One temporal-convolution encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub block_channels: Vec<usize>,
    pub kernel_size: usize,
    pub dilation_base: usize,
    pub dropout: f64,
    pub embedding_dim: usize,
}

impl EncoderSpec {
    pub fn short_default() -> Self {
        Self {
            block_channels: vec![64, 64, 32, 32],
            kernel_size: 3,
            dilation_base: 2,
            dropout: 0.1,
            embedding_dim: 32,
        }
    }

    pub fn long_default() -> Self {
        Self {
            block_channels: vec![64, 64, 64, 32, 32],
            kernel_size: 3,
            dilation_base: 4,
            dropout: 0.1,
            embedding_dim: 32,
        }
    }

    pub fn validate(&self, name: &str) -> Result<(), ConfigError> {
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            return Err(invalid(format!("{name}.block_channels must be non-empty and positive")));
        }
        if self.kernel_size == 0 || self.dilation_base == 0 {
            return Err(invalid(format!(
                "{name}.kernel_size and dilation_base must be positive"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("{name}.dropout must be in [0, 1)")));
        }
        if self.block_channels.last() != Some(&self.embedding_dim) {
            return Err(invalid(format!("{name}.embedding_dim must equal the last block width")));
        }
        Ok(())
    }
}

/// Encoder table where omitted keys fall back to a per-encoder default.
/// Without an explicit `embedding_dim` it follows the last block width.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialEncoder {
    block_channels: Option<Vec<usize>>,
    kernel_size: Option<usize>,
    dilation_base: Option<usize>,
    dropout: Option<f64>,
    embedding_dim: Option<usize>,
}

impl PartialEncoder {
    fn resolve(self, base: EncoderSpec) -> EncoderSpec {
        let block_channels = self.block_channels.unwrap_or(base.block_channels);
        let embedding_dim = self
            .embedding_dim
            .or_else(|| block_channels.last().copied())
            .unwrap_or(base.embedding_dim);
        EncoderSpec {
            block_channels,
            kernel_size: self.kernel_size.unwrap_or(base.kernel_size),
            dilation_base: self.dilation_base.unwrap_or(base.dilation_base),
            dropout: self.dropout.unwrap_or(base.dropout),
            embedding_dim,
        }
    }
}

fn short_encoder<'de, D: serde::Deserializer<'de>>(d: D) -> Result<EncoderSpec, D::Error> {
    Ok(PartialEncoder::deserialize(d)?.resolve(EncoderSpec::short_default()))
}

fn long_encoder<'de, D: serde::Deserializer<'de>>(d: D) -> Result<EncoderSpec, D::Error> {
    Ok(PartialEncoder::deserialize(d)?.resolve(EncoderSpec::long_default()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    #[serde(deserialize_with = "short_encoder")]
    pub short: EncoderSpec,
    #[serde(deserialize_with = "long_encoder")]
    pub long: EncoderSpec,
    pub predictor_hidden: usize,
    pub predictor_layers: usize,
    pub bootstrap_hidden: usize,
    pub bootstrap_layers: usize,
    pub distance_hidden: usize,
    pub predictor_lr_multiplier: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            short: EncoderSpec::short_default(),
            long: EncoderSpec::long_default(),
            predictor_hidden: 128,
            predictor_layers: 4,
            bootstrap_hidden: 64,
            bootstrap_layers: 2,
            distance_hidden: 64,
            predictor_lr_multiplier: 10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.short.validate("model.short")?;
        self.long.validate("model.long")?;
        if self.predictor_hidden == 0 || self.bootstrap_hidden == 0 || self.distance_hidden == 0 {
            return Err(invalid("model hidden widths must be positive"));
        }
        if !(self.predictor_lr_multiplier > 0.0) {
            return Err(invalid("model.predictor_lr_multiplier must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HoaConfig {
    pub bins: usize,
    /// Prediction window length in frames.
    pub horizon: usize,
    pub quantiles: (f64, f64),
}

impl Default for HoaConfig {
    fn default() -> Self {
        Self {
            bins: 32,
            horizon: 30,
            quantiles: (0.01, 0.99),
        }
    }
}

impl HoaConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.bins < 2 {
            return Err(invalid("hoa.bins must be >= 2"));
        }
        if self.horizon == 0 {
            return Err(invalid("hoa.horizon must be positive"));
        }
        let (lo, hi) = self.quantiles;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(invalid("hoa.quantiles must satisfy 0 <= lo < hi <= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    /// Short-term positive window radius in frames.
    pub window: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { window: 30 }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.window == 0 {
            return Err(invalid("bootstrap.window must be >= 1"));
        }
        Ok(())
    }
}

/// Weight of the bootstrap terms: probed from the initial model or fixed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AlphaRepr", into = "AlphaRepr")]
pub enum Alpha {
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AlphaRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<AlphaRepr> for Alpha {
    type Error = String;

    fn try_from(r: AlphaRepr) -> Result<Self, Self::Error> {
        match r {
            AlphaRepr::Number(v) if v >= 0.0 && v.is_finite() => Ok(Alpha::Fixed(v)),
            AlphaRepr::Number(v) => Err(format!("alpha must be a non-negative finite number, got {v}")),
            AlphaRepr::Text(s) if s == "auto" => Ok(Alpha::Auto),
            AlphaRepr::Text(s) => Err(format!("alpha must be \"auto\" or a number, got {s:?}")),
        }
    }
}

impl From<Alpha> for AlphaRepr {
    fn from(a: Alpha) -> Self {
        match a {
            Alpha::Auto => AlphaRepr::Text("auto".into()),
            Alpha::Fixed(v) => AlphaRepr::Number(v),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    /// Train split only.
    Inductive,
    /// Every sequence, labels unused.
    Transductive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    /// Sequential next-frames regression instead of histogram prediction.
    Hoa,
    /// Bootstrap weight forced to 0.
    Bootstrap,
    /// One encoder spanning the long receptive field.
    Multiscale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Last epoch (1-based) trained at `lr`.
    pub lr_drop_epoch: usize,
    pub lr_after_drop: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub anchors_per_sequence: usize,
    pub warmup_exclusion_s: f64,
    pub alpha: Alpha,
    pub alpha_probe_batches: usize,
    pub aux_weight: f64,
    pub checkpoint_every: usize,
    pub mode: PretrainMode,
    pub ablation: Ablation,
    pub sequential_horizon: usize,
    /// Optional cap on sequences visited per epoch (0 = all).
    pub max_sequences_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 1e-3,
            lr_drop_epoch: 100,
            lr_after_drop: 1e-4,
            weight_decay: 4e-5,
            batch_size: 96,
            anchors_per_sequence: 64,
            warmup_exclusion_s: 5.0,
            alpha: Alpha::Auto,
            alpha_probe_batches: 10,
            aux_weight: 1.0,
            checkpoint_every: 50,
            mode: PretrainMode::Inductive,
            ablation: Ablation::None,
            sequential_horizon: 10,
            max_sequences_per_epoch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.epochs == 0 || self.batch_size == 0 || self.anchors_per_sequence == 0 {
            return Err(invalid(
                "trainer.epochs, batch_size and anchors_per_sequence must be positive",
            ));
        }
        if !(self.lr > 0.0) || !(self.lr_after_drop > 0.0) {
            return Err(invalid("trainer learning rates must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !(self.aux_weight >= 0.0) || !(self.warmup_exclusion_s >= 0.0) {
            return Err(invalid(
                "trainer.weight_decay, aux_weight and warmup_exclusion_s must be >= 0",
            ));
        }
        if self.alpha == Alpha::Auto && self.alpha_probe_batches == 0 {
            return Err(invalid(
                "trainer.alpha_probe_batches must be positive with alpha = \"auto\"",
            ));
        }
        if self.sequential_horizon == 0 {
            return Err(invalid("trainer.sequential_horizon must be positive"));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_drop_epoch {
            self.lr
        } else {
            self.lr_after_drop
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Keep every n-th frame for frame-level probes.
    pub frame_stride: usize,
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Split used for the reported metric.
    pub test_split: String,
    pub train_split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frame_stride: 10,
            l2: 1e-4,
            max_iter: 2000,
            tol: 1e-6,
            test_split: "public".into(),
            train_split: "train".into(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.frame_stride == 0 || self.max_iter == 0 {
            return Err(invalid("eval.frame_stride and max_iter must be positive"));
        }
        if !(self.l2 >= 0.0) || !(self.tol > 0.0) {
            return Err(invalid("eval.l2 must be >= 0 and eval.tol > 0"));
        }
        if self.test_split == self.train_split {
            return Err(invalid("eval.test_split must differ from eval.train_split"));
        }
        Ok(())
    }
}
