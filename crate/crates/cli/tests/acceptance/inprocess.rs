//! Criteria checked directly against the library.

use std::time::Instant;

use bams::bootstrap::{bootstrap_graph, bootstrap_graph_with_targets, sample_positives, target_values, PositivePlan};
use bams::config::{DataConfig, EncoderSpec, ModelConfig, RunConfig};
use bams::diffcore::{grad_check, DiffError, GradCheckOptions};
use bams::eval::{model_embeddings, Timescale};
use bams::hoa::{emd2, wasserstein1};
use bams::model::{load_checkpoint, receptive_field, save_checkpoint, BamsModel, EncodedVars, ModelError};
use bams::synth::{generate_sequence, sequence_id, to_record};
use bams::trainer::{
    initial_model, sample_sequence, sequence_loss_graph, train, LossWeights, StepRecord, TrainData, TrainError,
    TrainObserver, TRAIN_LOG,
};
use bams::{Adam, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::transport::transport_cost;

pub type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn encoder(widths: Vec<usize>, dilation_base: usize, embedding_dim: usize) -> EncoderSpec {
    EncoderSpec {
        block_channels: widths,
        kernel_size: 3,
        dilation_base,
        dropout: 0.0,
        embedding_dim,
    }
}

/// Narrow model on short sequences.
pub fn tiny_config(n_actions: usize, n_frames: usize, width: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data = DataConfig {
        n_sequences: 4,
        n_frames,
        n_actions,
        ..DataConfig::default()
    };
    cfg.model.short = encoder(vec![width, width], 2, width);
    cfg.model.long = encoder(vec![width, width], 4, width);
    cfg.model.predictor_hidden = width;
    cfg.model.predictor_layers = 1;
    cfg.model.bootstrap_hidden = width;
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

fn train_data(cfg: &RunConfig, first_seed: u64) -> TrainData {
    let seqs: Vec<_> = (0..cfg.data.n_sequences)
        .map(|i| {
            to_record(
                sequence_id(i),
                "train",
                &generate_sequence(first_seed + i as u64, &cfg.data).unwrap(),
            )
        })
        .collect();
    TrainData::from_sequences(&seqs, cfg.data.frame_rate_hz, cfg).unwrap()
}

fn random_histogram(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut h: Vec<f64> = (0..k)
        .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() })
        .collect();
    if h.iter().all(|&v| v == 0.0) {
        h[rng.gen_range(0..k)] = 1.0;
    }
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= s);
    h
}

pub fn emd_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let k = rng.gen_range(2..=8);
        let a = random_histogram(&mut rng, k);
        let b = random_histogram(&mut rng, k);
        let w = wasserstein1(&a, &b).unwrap();
        worst = worst.max((w - transport_cost(&a, &b)).abs());
        let (mut ca, mut cb, mut sq) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(&b) {
            ca += x;
            cb += y;
            sq += (ca - cb) * (ca - cb);
        }
        let e = emd2(&a, &b).unwrap();
        ensure((e - sq).abs() < 1e-12, || format!("emd2 {e} vs cdf sum {sq}"))?;
    }
    ensure(worst < 1e-9, || {
        format!("wasserstein1 differs from the transport solver by {worst:e}")
    })?;
    let far = emd2(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]).unwrap();
    let near = emd2(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
    ensure(far == 2.0 && near == 1.0, || format!("fixtures gave {far} and {near}"))?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "200 pairs, max |diff| {worst:.1e}, fixtures 2 and 1, {secs:.2} s"
    ))
}

fn plan_for(frames: usize, seed: u64) -> PositivePlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anchors: Vec<usize> = (30..frames - 10).step_by(7).collect();
    sample_positives(&mut rng, &vec![true; frames], &anchors, 5)
}

fn diff_err(e: ModelError) -> DiffError {
    match e {
        ModelError::Diff(d) => d,
        other => panic!("{other}"),
    }
}

fn check(
    store: &ParamStore,
    opts: &GradCheckOptions,
    f: impl Fn(&ParamStore, &mut Graph) -> Result<bams::diffcore::Var, DiffError>,
) -> Result<f64, String> {
    let r = grad_check(store, f, opts).map_err(|e| e.to_string())?;
    ensure(r.max_rel_err < 1e-4, || {
        format!("max relative error {:e} at {:?}", r.max_rel_err, r.worst)
    })?;
    Ok(r.max_rel_err)
}

pub fn gradient_fidelity() -> Outcome {
    let started = Instant::now();
    let opts = GradCheckOptions {
        step: 1e-5,
        coords_per_param: 4,
        seed: 5,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (rows, channels, bins) = (5, 3, 6);
    let mut store = ParamStore::new();
    let logits: Vec<f64> = (0..rows * channels * bins).map(|_| rng.gen_range(-2.0..2.0)).collect();
    store
        .add("logits", Tensor::new(vec![rows, channels * bins], logits).unwrap())
        .unwrap();
    let targets: Vec<f64> = (0..rows * channels)
        .flat_map(|_| random_histogram(&mut rng, bins))
        .collect();
    let mask = [true, true, false, true, true];
    let hoa = check(&store, &opts, |s, g| {
        let id = s.id("logits").unwrap();
        let x = g.param(s, id);
        let p = g.group_softmax(x, bins)?;
        g.hoa_loss(p, &targets, &mask, bins, 0.25)
    })?;

    let cfg = tiny_config(2, 80, 8);
    let data = train_data(&cfg, 40);
    let model = initial_model(&cfg, &data).unwrap();
    let input = data.sequences[0].agents[0].input.clone();
    let plan = plan_for(input.dim(1), 9);
    let fixed = {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let enc = model.encode_graph(&mut g, &model.store, x, None).unwrap();
        target_values(&mut g, &enc, &plan).unwrap()
    };
    let boot = |pick: usize| {
        check(&model.store, &opts, |s, g| {
            let x = g.input(input.clone());
            let enc = model.encode_graph(g, s, x, None).map_err(diff_err)?;
            let (a, b) = bootstrap_graph(&model, g, s, &enc, &plan, 0.1, Some(&fixed)).map_err(diff_err)?;
            Ok(if pick == 0 { a } else { b })
        })
    };
    let short = boot(0)?;
    let long = boot(1)?;
    // The live stop-gradient path must give the gradient of the frozen-target objective.
    let grads = |frozen: bool| {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let enc = model.encode_graph(&mut g, &model.store, x, None).unwrap();
        let (a, b) = bootstrap_graph(&model, &mut g, &model.store, &enc, &plan, 0.1, frozen.then_some(&fixed)).unwrap();
        let t = g.add(a, b).unwrap();
        g.backward(t).unwrap().param_grads(model.store.len())
    };
    ensure(grads(true) == grads(false), || {
        "live stop-gradient gradients differ from frozen targets".into()
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let smp = sample_sequence(&mut rng, &data, 0, &cfg);
    let seq = &data.sequences[0];
    let w = LossWeights::for_batch(std::slice::from_ref(&smp), &data, 0.7, 1.0);
    let frozen: Vec<_> = seq
        .agents
        .iter()
        .zip(&smp.plans)
        .map(|(ag, p)| {
            let mut g = Graph::new();
            let x = g.input(ag.input.clone());
            let enc = model.encode_graph(&mut g, &model.store, x, None).unwrap();
            target_values(&mut g, &enc, p).unwrap()
        })
        .collect();
    let full = check(&model.store, &opts, |s, g| {
        sequence_loss_graph(&model, g, s, seq, &smp, &w, Some(&frozen), None)
            .map(|v| v.total)
            .map_err(|e| match e {
                TrainError::Model(m) => diff_err(m),
                other => panic!("{other}"),
            })
    })?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "max rel err: hoa {hoa:.1e}, short {short:.1e}, long {long:.1e}, full {full:.1e}; {secs:.1} s"
    ))
}

pub fn causality_and_receptive_field() -> Outcome {
    let started = Instant::now();
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::default();
    cfg.data.n_sequences = 1;
    cfg.data.n_frames = 1400;
    let data = train_data(&cfg, 0);
    let model = initial_model(&cfg, &data).unwrap();
    let (rf_short, rf_long) = model.receptive_fields();
    ensure(
        (rf_short, rf_long) == (61, 1365) && receptive_field(&cfg.model.short) == 61,
        || format!("receptive fields {rf_short} and {rf_long}"),
    )?;
    let base_input = data.sequences[0].agents[0].input.clone();
    let (c, t) = (base_input.dim(0), base_input.dim(1));
    let encode = |x: &Tensor| model.encode(x).unwrap();
    let base = encode(&base_input);
    let rows = |e: &bams::model::Embedding, long: bool, f: usize| -> Vec<u64> {
        let (v, d) = if long {
            (&e.long, e.long_dim)
        } else {
            (&e.short, e.short_dim)
        };
        v[f * d..(f + 1) * d].iter().map(|x| x.to_bits()).collect()
    };

    let future = 900;
    let mut x = base_input.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for ch in 0..c {
        for f in future..t {
            x.data_mut()[ch * t + f] += rng.gen_range(-3.0..3.0);
        }
    }
    let e = encode(&x);
    for long in [false, true] {
        let broken = (0..future).find(|&f| rows(&e, long, f) != rows(&base, long, f));
        ensure(broken.is_none(), || {
            format!("frame {broken:?} moved after perturbing frames >= {future}")
        })?;
    }

    let probe = |at: usize, long: bool, rf: usize| -> Result<(), String> {
        let mut x = base_input.clone();
        for ch in 0..c {
            x.data_mut()[ch * t + at] += 1.0;
        }
        let e = encode(&x);
        for f in 0..t {
            let moved = rows(&e, long, f) != rows(&base, long, f);
            let inside = f >= at && f < at + rf;
            ensure(moved == inside, || {
                format!(
                    "{} path: perturbing frame {at} moved={moved} at frame {f}",
                    if long { "long" } else { "short" }
                )
            })?;
        }
        Ok(())
    };
    probe(700, false, rf_short)?;
    probe(20, true, rf_long)?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "future invariance exact; boundaries at {rf_short} and {rf_long} frames; {secs:.1} s"
    ))
}

pub fn stop_gradient() -> Outcome {
    let cfg = tiny_config(3, 200, 6);
    let data = train_data(&cfg, 70);
    let model = initial_model(&cfg, &data).unwrap();
    let input = data.sequences[0].agents[0].input.clone();
    let plan = plan_for(input.dim(1), 2);

    // Separate target pass: its parameter leaves must all get exact zeros.
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let enc = model.encode_graph(&mut g, &model.store, x, None).unwrap();
    let start = g.len();
    let target_enc = model.encode_graph(&mut g, &model.store, x, None).unwrap();
    let end = g.len();
    let (a, b) = bootstrap_graph_with_targets(&model, &mut g, &model.store, &enc, &target_enc, &plan, 1.0).unwrap();
    let total = g.add(a, b).unwrap();
    let grads = g.backward(total).unwrap();
    let mut target_leaves = 0;
    for &(v, pid) in grads.param_leaves() {
        if !(start..end).contains(&v.index()) {
            continue;
        }
        target_leaves += 1;
        let name = &model.store.get(pid).name;
        if let Some(gv) = grads.of(v) {
            ensure(gv.iter().all(|&x| x == 0.0), || {
                format!("{name} received gradient through the target pass")
            })?;
        }
    }
    let encoder_params = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("short.") || p.name.starts_with("long."))
        .count();
    ensure(target_leaves == encoder_params, || {
        format!("{target_leaves} target-pass leaves for {encoder_params} encoder parameters")
    })?;

    // Constant anchors, live targets: encoder parameters are reachable only
    // through the targets.
    let e = model.encode(&input).unwrap();
    let channel_major = |rows: &[f64], d: usize| {
        let n = e.n_frames;
        let mut out = vec![0.0; rows.len()];
        for f in 0..n {
            for k in 0..d {
                out[k * n + f] = rows[f * d + k];
            }
        }
        Tensor::new(vec![d, n], out).unwrap()
    };
    let mut g = Graph::new();
    let anchors = EncodedVars {
        short: g.input(channel_major(&e.short, e.short_dim)),
        long: g.input(channel_major(&e.long, e.long_dim)),
        shared: false,
    };
    let x = g.input(input);
    let live = model.encode_graph(&mut g, &model.store, x, None).unwrap();
    let (a, b) = bootstrap_graph_with_targets(&model, &mut g, &model.store, &anchors, &live, &plan, 1.0).unwrap();
    let total = g.add(a, b).unwrap();
    let grads = g.backward(total).unwrap().param_grads(model.store.len());
    let mut zero = 0;
    for ((_, p), gr) in model.store.iter().zip(&grads) {
        let is_encoder = p.name.starts_with("short.") || p.name.starts_with("long.");
        let all_zero = gr.as_ref().is_none_or(|v| v.iter().all(|&x| x == 0.0));
        if is_encoder {
            ensure(all_zero, || format!("{} received gradient from a target", p.name))?;
            zero += 1;
        } else if p.name.starts_with("q_") {
            ensure(!all_zero, || format!("predictor {} received no gradient", p.name))?;
        }
    }
    Ok(format!(
        "{target_leaves} target-pass leaves and {zero} target-only parameters all exactly zero"
    ))
}

#[derive(Default)]
struct HistogramAudit {
    rows: usize,
    worst: f64,
    steps: Vec<StepRecord>,
}

impl TrainObserver for HistogramAudit {
    fn on_histograms(&mut self, targets: &[f64], probs: &[f64], bins: usize) {
        for row in targets.chunks(bins).chain(probs.chunks(bins)) {
            self.rows += 1;
            self.worst = self.worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }

    fn on_step(&mut self, record: &StepRecord) {
        self.steps.push(record.clone());
    }
}

pub fn histogram_normalization() -> Outcome {
    let mut cfg = tiny_config(4, 1000, 8);
    cfg.data.n_sequences = 12;
    cfg.data.difficulty_noise = 1.5;
    cfg.trainer.epochs = 1;
    cfg.trainer.batch_size = 4;
    cfg.trainer.anchors_per_sequence = 64;
    let data = train_data(&cfg, 100);
    let mut audit = HistogramAudit::default();
    train(&cfg, &data, None, &mut audit).map_err(|e| e.to_string())?;
    ensure(audit.rows > 0, || "no histograms observed".into())?;
    ensure(audit.worst < 1e-9, || format!("row sum off by {:e}", audit.worst))?;
    Ok(format!(
        "{} rows over one epoch, max |sum - 1| {:.1e}",
        audit.rows, audit.worst
    ))
}

pub fn checkpoint_round_trip() -> Outcome {
    let cfg = tiny_config(3, 300, 6);
    let data = train_data(&cfg, 200);
    let model = train(&cfg, &data, None, &mut bams::trainer::NoObserver)
        .map_err(|e| e.to_string())?
        .model;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &path, serde_json::json!({"epoch": 2})).map_err(|e| e.to_string())?;
    let (loaded, _) = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let seqs: Vec<_> = (0..10)
        .map(|i| {
            let dc = DataConfig {
                n_frames: rng.gen_range(150..600),
                ..cfg.data.clone()
            };
            to_record(sequence_id(i), "train", &generate_sequence(rng.gen(), &dc).unwrap())
        })
        .collect();
    let bits = |m: &BamsModel| -> Vec<u64> {
        seqs.iter()
            .flat_map(|s| {
                let e = m.embed(&s.agents[0]).unwrap();
                e.short.into_iter().chain(e.long).map(f64::to_bits)
            })
            .collect()
    };
    let (before, after) = (bits(&model), bits(&loaded));
    ensure(before == after, || "encodings differ after reload".into())?;
    let exported = |m: &BamsModel| model_embeddings(m, &seqs, &[Timescale::Both]).unwrap().remove(0);
    let (a, b) = (exported(&model), exported(&loaded));
    let same = a.sequences.iter().zip(&b.sequences).all(|(x, y)| {
        x.data
            .iter()
            .map(|v| v.to_bits())
            .eq(y.data.iter().map(|v| v.to_bits()))
    });
    ensure(same, || "exported embeddings differ after reload".into())?;
    Ok(format!("10 sequences, {} values bit-identical", before.len()))
}

pub fn schedule_conformance() -> Outcome {
    let mut cfg = tiny_config(2, 120, 4);
    cfg.data.n_sequences = 2;
    cfg.trainer.epochs = cfg.trainer.lr_drop_epoch + 3;
    cfg.trainer.anchors_per_sequence = 4;
    let data = train_data(&cfg, 300);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut audit = HistogramAudit::default();
    let out = train(&cfg, &data, Some(dir.path()), &mut audit).map_err(|e| e.to_string())?;
    let lr_for = |epoch: usize| if epoch <= 100 { 1e-3 } else { 1e-4 };

    let mut reader = csv::Reader::from_path(dir.path().join(TRAIN_LOG)).map_err(|e| e.to_string())?;
    let header = reader.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (ce, cl, cp) = (col("epoch"), col("lr"), col("predictor_lr"));
    let mut logged = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let epoch: usize = rec[ce].parse().unwrap();
        let lr: f64 = rec[cl].parse().unwrap();
        let plr: f64 = rec[cp].parse().unwrap();
        ensure(lr == lr_for(epoch), || format!("epoch {epoch} logged lr {lr}"))?;
        ensure((plr - 10.0 * lr).abs() <= 1e-15, || {
            format!("epoch {epoch} predictor lr {plr}")
        })?;
        logged += 1;
    }
    ensure(logged == cfg.trainer.epochs, || format!("{logged} log rows"))?;
    for s in &audit.steps {
        ensure(s.lr == lr_for(s.epoch), || format!("step {} lr {}", s.step, s.lr))?;
        ensure((s.predictor_lr - 10.0 * s.lr).abs() <= 1e-15, || {
            format!("step {} predictor lr {}", s.step, s.predictor_lr)
        })?;
    }

    let mut model = out.model;
    for (_, p) in model.store.iter() {
        let expect = if p.name.starts_with("q_short.") || p.name.starts_with("q_long.") {
            10.0
        } else {
            1.0
        };
        ensure(p.lr_multiplier == expect, || {
            format!("{} multiplier {}", p.name, p.lr_multiplier)
        })?;
    }
    // A first Adam step with unit gradients moves each weight by its effective rate.
    let before: Vec<Vec<f64>> = model.store.iter().map(|(_, p)| p.tensor.data().to_vec()).collect();
    let grads: Vec<Option<Vec<f64>>> = before.iter().map(|w| Some(vec![1.0; w.len()])).collect();
    let mut adam = Adam::new(&model.store, 0.0);
    adam.step(&mut model.store, &grads, 1e-3).map_err(|e| e.to_string())?;
    for ((_, p), w0) in model.store.iter().zip(&before) {
        let rate = 1e-3 * p.lr_multiplier;
        for (a, b) in p.tensor.data().iter().zip(w0) {
            let moved = b - a;
            ensure((moved / rate - 1.0).abs() < 1e-4, || {
                format!("{} moved {moved} for rate {rate}", p.name)
            })?;
        }
    }
    Ok(format!(
        "{logged} epochs and {} steps logged at 1e-3 then 1e-4, predictors at 10x",
        audit.steps.len()
    ))
}
