//! Positive-view sampling at two timescales and the latent-predictive losses.
//!
//! The short-term positive of an anchor `t` is `t + delta` with `delta`
//! uniform over valid offsets in `[-window, window]`; the long-term positive
//! is any valid frame of the same sequence. The predictor output at the
//! anchor is pulled toward the stop-gradient embedding of the positive, both
//! projected on the unit sphere.

use rand::Rng;

use crate::diffcore::Var;
use crate::model::{BamsModel, EncodedVars, ModelError};
use crate::{Graph, ParamStore, Tensor};

pub const NORM_EPS: f64 = 1e-8;

/// Anchors with one short- and one long-term positive each.
#[derive(Clone, Debug, PartialEq)]
pub struct PositivePlan {
    pub anchors: Vec<usize>,
    pub offsets: Vec<isize>,
    /// `anchor + offset`.
    pub short_targets: Vec<usize>,
    pub long_targets: Vec<usize>,
    pub window: usize,
}

impl PositivePlan {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Draws one positive pair per anchor. Anchors without any valid candidate
/// are dropped from the plan.
pub fn sample_positives<R: Rng>(rng: &mut R, validity: &[bool], anchors: &[usize], window: usize) -> PositivePlan {
    let t_len = validity.len() as isize;
    let valid_frames: Vec<usize> = (0..validity.len()).filter(|&t| validity[t]).collect();
    let w = window as isize;
    let mut plan = PositivePlan {
        anchors: Vec::with_capacity(anchors.len()),
        offsets: Vec::with_capacity(anchors.len()),
        short_targets: Vec::with_capacity(anchors.len()),
        long_targets: Vec::with_capacity(anchors.len()),
        window,
    };
    let mut candidates = Vec::with_capacity(2 * window + 1);
    for &a in anchors {
        let at = a as isize;
        candidates.clear();
        candidates.extend((-w..=w).filter(|&d| {
            let t = at + d;
            t >= 0 && t < t_len && validity[t as usize]
        }));
        if candidates.is_empty() || valid_frames.is_empty() {
            continue;
        }
        let delta = candidates[rng.gen_range(0..candidates.len())];
        let far = valid_frames[rng.gen_range(0..valid_frames.len())];
        plan.anchors.push(a);
        plan.offsets.push(delta);
        plan.short_targets.push((at + delta) as usize);
        plan.long_targets.push(far);
    }
    plan
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_EPS;
    v.iter().map(|x| x / n).collect()
}

/// `|| p / ||p|| - z / ||z|| ||^2` with the target treated as a constant.
pub fn latent_predictive_loss(prediction: &[f64], target: &[f64]) -> f64 {
    unit(prediction)
        .iter()
        .zip(unit(target))
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Target embeddings of a plan, frozen as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedTargets {
    /// `[B x D_s]` (full width in the single-encoder variant).
    pub short: Tensor,
    /// `[B x D_l]`.
    pub long: Tensor,
}

/// Target embedding values at the plan positives.
pub fn target_values(g: &mut Graph, enc: &EncodedVars, plan: &PositivePlan) -> Result<FixedTargets, ModelError> {
    let s = g.gather_columns(enc.short, &plan.short_targets)?;
    let l = g.gather_columns(enc.long, &plan.long_targets)?;
    Ok(FixedTargets {
        short: g.value(s).clone(),
        long: g.value(l).clone(),
    })
}

/// Graph nodes for `weight * sum` of the short and long latent-predictive
/// losses over the plan. Targets come from `fixed` when given, otherwise from
/// the live encoder outputs behind a stop-gradient.
pub fn bootstrap_graph(
    model: &BamsModel,
    g: &mut Graph,
    store: &ParamStore,
    enc: &EncodedVars,
    plan: &PositivePlan,
    weight: f64,
    fixed: Option<&FixedTargets>,
) -> Result<(Var, Var), ModelError> {
    match fixed {
        Some(f) => {
            if plan.is_empty() {
                let zero = g.input(Tensor::scalar(0.0));
                return Ok((zero, zero));
            }
            let (ts, tl) = (g.input(f.short.clone()), g.input(f.long.clone()));
            predictive_losses(model, g, store, enc, plan, weight, ts, tl)
        }
        None => bootstrap_graph_with_targets(model, g, store, enc, enc, plan, weight),
    }
}

/// As [`bootstrap_graph`], with targets read from a separate encoding pass
/// `target_enc` behind a stop-gradient.
pub fn bootstrap_graph_with_targets(
    model: &BamsModel,
    g: &mut Graph,
    store: &ParamStore,
    enc: &EncodedVars,
    target_enc: &EncodedVars,
    plan: &PositivePlan,
    weight: f64,
) -> Result<(Var, Var), ModelError> {
    if plan.is_empty() {
        let zero = g.input(Tensor::scalar(0.0));
        return Ok((zero, zero));
    }
    let s = g.gather_columns(target_enc.short, &plan.short_targets)?;
    let l = g.gather_columns(target_enc.long, &plan.long_targets)?;
    let (ts, tl) = (g.detach(s), g.detach(l));
    predictive_losses(model, g, store, enc, plan, weight, ts, tl)
}

#[allow(clippy::too_many_arguments)]
fn predictive_losses(
    model: &BamsModel,
    g: &mut Graph,
    store: &ParamStore,
    enc: &EncodedVars,
    plan: &PositivePlan,
    weight: f64,
    ts: Var,
    tl: Var,
) -> Result<(Var, Var), ModelError> {
    let zs = g.gather_columns(enc.short, &plan.anchors)?;
    let ps = model.q_short_graph(g, store, zs)?;
    let ps = g.normalize_rows(ps, NORM_EPS)?;
    let ts = g.normalize_rows(ts, NORM_EPS)?;
    let short = g.sq_dist_sum(ps, ts, weight)?;

    let zl = g.gather_columns(enc.long, &plan.anchors)?;
    let pl = model.q_long_graph(g, store, zl)?;
    let pl = g.normalize_rows(pl, NORM_EPS)?;
    let tl = g.normalize_rows(tl, NORM_EPS)?;
    let long = g.sq_dist_sum(pl, tl, weight)?;
    Ok((short, long))
}

/// Mean short and long losses of a plan on one encoded sequence, plus the
/// number of anchors used (0 flags an empty plan).
pub fn bootstrap_losses(
    model: &BamsModel,
    input: &Tensor,
    plan: &PositivePlan,
) -> Result<(f64, f64, usize), ModelError> {
    if plan.is_empty() {
        log::warn!("bootstrap_losses: empty positive plan");
        return Ok((0.0, 0.0, 0));
    }
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let enc = model.encode_graph(&mut g, &model.store, x, None)?;
    let w = 1.0 / plan.len() as f64;
    let (s, l) = bootstrap_graph(model, &mut g, &model.store, &enc, plan, w, None)?;
    Ok((g.scalar(s), g.scalar(l), plan.len()))
}
