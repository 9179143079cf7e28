#![allow(dead_code)]

use bams::config::{DataConfig, EncoderSpec, RunConfig};
use bams::model::BamsModel;
use bams::synth::{generate_sequence, sequence_id, to_record};
use bams::trainer::{initial_model, TrainData};

/// Small but complete configuration: 3 action channels, short sequences,
/// narrow encoders.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data = DataConfig {
        n_sequences: 4,
        n_frames: 260,
        n_actions: 3,
        ..DataConfig::default()
    };
    cfg.model.short = EncoderSpec {
        block_channels: vec![6, 5],
        kernel_size: 3,
        dilation_base: 2,
        dropout: 0.0,
        embedding_dim: 5,
    };
    cfg.model.long = EncoderSpec {
        block_channels: vec![6, 4],
        kernel_size: 3,
        dilation_base: 4,
        dropout: 0.0,
        embedding_dim: 4,
    };
    cfg.model.predictor_hidden = 8;
    cfg.model.predictor_layers = 1;
    cfg.model.bootstrap_hidden = 6;
    cfg.model.bootstrap_layers = 1;
    cfg.hoa.bins = 6;
    cfg.hoa.horizon = 10;
    cfg.bootstrap.window = 5;
    cfg.trainer.epochs = 2;
    cfg.trainer.batch_size = 2;
    cfg.trainer.anchors_per_sequence = 8;
    cfg.trainer.warmup_exclusion_s = 1.0;
    cfg.trainer.alpha_probe_batches = 2;
    cfg
}

pub fn tiny_data(cfg: &RunConfig) -> TrainData {
    let seqs: Vec<_> = (0..cfg.data.n_sequences)
        .map(|i| {
            to_record(
                sequence_id(i),
                "train",
                &generate_sequence(cfg.seed + i as u64, &cfg.data).unwrap(),
            )
        })
        .collect();
    TrainData::from_sequences(&seqs, cfg.data.frame_rate_hz, cfg).unwrap()
}

pub fn tiny_model() -> (RunConfig, TrainData, BamsModel) {
    let cfg = tiny_config();
    let data = tiny_data(&cfg);
    let model = initial_model(&cfg, &data).unwrap();
    (cfg, data, model)
}
