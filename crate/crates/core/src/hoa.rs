//! Histogram-of-actions targets and the squared-CDF earth mover's loss.
//!
//! For every action channel, the values taken over the `L` frames after an
//! anchor are binned into `K` equally spaced bins and normalized. Predictions
//! are compared to these targets with
//! `EMD2(h, p) = sum_k (CDF_k(h) - CDF_k(p))^2`, summed over channels.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum HoaError {
    #[error("histogram length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("bin count must be >= 2, got {0}")]
    TooFewBins(usize),
    #[error("channel {0} has no valid frames to fit a bin range")]
    NoValidFrames(usize),
    #[error("invalid quantile pair ({0}, {1})")]
    Quantiles(f64, f64),
    #[error("channel index {0} out of range")]
    Channel(usize),
}

/// Equal-width binning shared by every target histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinningSpec {
    pub bins: usize,
    /// `(lo, hi)` per action channel.
    pub ranges: Vec<(f64, f64)>,
    /// Quantile pair the ranges were fitted at.
    pub quantiles: (f64, f64),
}

impl BinningSpec {
    pub fn new(bins: usize, ranges: Vec<(f64, f64)>) -> Result<Self, HoaError> {
        if bins < 2 {
            return Err(HoaError::TooFewBins(bins));
        }
        Ok(Self {
            bins,
            ranges,
            quantiles: (0.0, 1.0),
        })
    }

    pub fn channels(&self) -> usize {
        self.ranges.len()
    }

    pub fn width(&self, channel: usize) -> f64 {
        let (lo, hi) = self.ranges[channel];
        (hi - lo) / self.bins as f64
    }

    /// Bin index after clipping into `[lo, hi]`.
    pub fn bin_of(&self, channel: usize, value: f64) -> usize {
        let (lo, hi) = self.ranges[channel];
        let v = value.clamp(lo, hi);
        let idx = ((v - lo) / (hi - lo) * self.bins as f64).floor();
        (idx.max(0.0) as usize).min(self.bins - 1)
    }
}

/// Linear-interpolation empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

/// Per-channel ranges from the `(q_lo, q_hi)` quantiles of the observed
/// action values. `channels[c]` holds the values of channel `c` on valid
/// frames. Degenerate ranges are widened by `1e-6` on each side.
pub fn fit_binning(channels: &[Vec<f64>], bins: usize, quantiles: (f64, f64)) -> Result<BinningSpec, HoaError> {
    if bins < 2 {
        return Err(HoaError::TooFewBins(bins));
    }
    let (q_lo, q_hi) = quantiles;
    if !(0.0..=1.0).contains(&q_lo) || !(0.0..=1.0).contains(&q_hi) || q_lo >= q_hi {
        return Err(HoaError::Quantiles(q_lo, q_hi));
    }
    let mut ranges = Vec::with_capacity(channels.len());
    for (c, values) in channels.iter().enumerate() {
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if sorted.is_empty() {
            return Err(HoaError::NoValidFrames(c));
        }
        sorted.sort_by(f64::total_cmp);
        let mut lo = quantile_sorted(&sorted, q_lo);
        let mut hi = quantile_sorted(&sorted, q_hi);
        if hi - lo <= 0.0 {
            lo -= 1e-6;
            hi += 1e-6;
        }
        ranges.push((lo, hi));
    }
    Ok(BinningSpec {
        bins,
        ranges,
        quantiles,
    })
}

/// Normalized histogram of `values` for one channel, counting only frames
/// whose `valid` flag is set (all frames when `valid` is `None`). Returns a
/// zero vector when nothing was counted.
pub fn action_histogram(values: &[f64], valid: Option<&[bool]>, spec: &BinningSpec, channel: usize) -> Vec<f64> {
    let mut h = vec![0.0; spec.bins];
    let mut counted = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if valid.is_some_and(|m| !m[i]) {
            continue;
        }
        h[spec.bin_of(channel, v)] += 1.0;
        counted += 1;
    }
    if counted > 0 {
        let inv = 1.0 / counted as f64;
        h.iter_mut().for_each(|x| *x *= inv);
    }
    h
}

/// `N x K` target for one anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramTarget {
    /// Row-major `[N x K]`.
    pub h: Vec<f64>,
    pub anchor: usize,
    pub horizon: usize,
}

/// Histograms of frames `anchor+1 ..= anchor+horizon` for every action
/// channel. `actions[c]` is the full series of channel `c`.
pub fn build_target(
    actions: &[&[f64]],
    validity: &[bool],
    anchor: usize,
    horizon: usize,
    spec: &BinningSpec,
) -> HistogramTarget {
    let lo = anchor + 1;
    let hi = anchor + horizon + 1;
    let mask = &validity[lo..hi];
    let mut h = Vec::with_capacity(actions.len() * spec.bins);
    for (c, series) in actions.iter().enumerate() {
        h.extend(action_histogram(&series[lo..hi], Some(mask), spec, c));
    }
    HistogramTarget { h, anchor, horizon }
}

/// EMD2 without length checks. The target's final CDF entry is pinned to 1.
pub(crate) fn emd2_unchecked<F: Scalar>(target: &[F], pred: &[F]) -> F {
    let k = target.len();
    let mut ct = F::zero();
    let mut cp = F::zero();
    let mut total = F::zero();
    for i in 0..k {
        ct += target[i];
        cp += pred[i];
        let ctv = if i + 1 == k { F::one() } else { ct };
        let d = ctv - cp;
        total += d * d;
    }
    total
}

/// Adds `scale * d EMD2 / d pred` into `dst`.
pub(crate) fn emd2_grad_accumulate<F: Scalar>(target: &[F], pred: &[F], scale: F, dst: &mut [F]) {
    let k = target.len();
    let mut diffs = vec![F::zero(); k];
    let mut ct = F::zero();
    let mut cp = F::zero();
    for i in 0..k {
        ct += target[i];
        cp += pred[i];
        let ctv = if i + 1 == k { F::one() } else { ct };
        diffs[i] = ctv - cp;
    }
    // d/dp_j = -2 * sum_{i >= j} diffs[i]
    let two = F::lit(2.0);
    let mut suffix = F::zero();
    for j in (0..k).rev() {
        suffix += diffs[j];
        dst[j] -= scale * two * suffix;
    }
}

/// Squared-CDF earth mover's distance between two histograms on the same bins.
pub fn emd2<F: Scalar>(target: &[F], pred: &[F]) -> Result<F, HoaError> {
    if target.len() != pred.len() {
        return Err(HoaError::LengthMismatch(target.len(), pred.len()));
    }
    Ok(emd2_unchecked(target, pred))
}

/// `sum_k |CDF_k(a) - CDF_k(b)|`: the optimal transport cost with unit cost
/// per bin step.
pub fn wasserstein1<F: Scalar>(a: &[F], b: &[F]) -> Result<F, HoaError> {
    if a.len() != b.len() {
        return Err(HoaError::LengthMismatch(a.len(), b.len()));
    }
    let mut ca = F::zero();
    let mut cb = F::zero();
    let mut total = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        ca += x;
        cb += y;
        total += (ca - cb).abs();
    }
    Ok(total)
}

/// Result of [`hoa_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HoaLossValue {
    pub value: f64,
    pub anchors_used: usize,
}

/// Per-anchor loss summed over the `N` channels, averaged over the masked-in
/// anchors. An all-masked batch yields 0 with `anchors_used == 0`.
pub fn hoa_loss(
    predicted: &[f64],
    targets: &[f64],
    mask: &[bool],
    channels: usize,
    bins: usize,
) -> Result<HoaLossValue, HoaError> {
    let row = channels * bins;
    if predicted.len() != targets.len() {
        return Err(HoaError::LengthMismatch(predicted.len(), targets.len()));
    }
    if predicted.len() != mask.len() * row {
        return Err(HoaError::LengthMismatch(predicted.len(), mask.len() * row));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for (b, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        used += 1;
        let p = &predicted[b * row..(b + 1) * row];
        let t = &targets[b * row..(b + 1) * row];
        for (ph, th) in p.chunks(bins).zip(t.chunks(bins)) {
            total += emd2_unchecked(th, ph);
        }
    }
    if used == 0 {
        log::warn!("hoa_loss: every anchor in the batch is masked out");
        return Ok(HoaLossValue {
            value: 0.0,
            anchors_used: 0,
        });
    }
    Ok(HoaLossValue {
        value: total / used as f64,
        anchors_used: used,
    })
}
