//! Pose-invariant per-agent feature channels from keypoint trajectories,
//! validity handling and dataset-level normalization.
//!
//! Velocities are backward differences scaled by the frame rate, so the
//! features at frame `t` only read frames `t - 1` and `t`. A frame is valid
//! when the keypoints at both frames are valid; invalid frames carry zeros in
//! every channel, including the validity flag.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("agent index {agent} out of range ({agents} agents)")]
    Agent { agent: usize, agents: usize },
    #[error("keypoint array has {found} values, expected {expected}")]
    KeypointLength { expected: usize, found: usize },
    #[error("sequence needs at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("frame rate must be positive")]
    FrameRate,
    #[error("layout needs {needed} keypoints but the sequence has {found}")]
    Layout { needed: usize, found: usize },
    #[error("cannot fit normalization on an empty dataset")]
    EmptyDataset,
    #[error("channel count mismatch: expected {expected}, found {found}")]
    Channels { expected: usize, found: usize },
    #[error("channel layout must contain exactly one validity channel, found {0}")]
    ValidityChannel(usize),
    #[error("action channel {0} is not a valid channel index")]
    ActionChannel(usize),
    #[error("no action channels declared")]
    NoActions,
}

/// How a channel is treated by normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// Z-scored.
    Linear,
    /// sin/cos component, passed through.
    Angle,
    /// 0/1 frame validity flag, passed through.
    Validity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub names: Vec<String>,
    pub kinds: Vec<ChannelKind>,
    pub action_channels: Vec<usize>,
}

impl ChannelLayout {
    pub fn new(names: Vec<String>, kinds: Vec<ChannelKind>, action_channels: Vec<usize>) -> Result<Self, FeatureError> {
        if names.len() != kinds.len() {
            return Err(FeatureError::Channels {
                expected: names.len(),
                found: kinds.len(),
            });
        }
        let n_valid = kinds.iter().filter(|k| **k == ChannelKind::Validity).count();
        if n_valid != 1 {
            return Err(FeatureError::ValidityChannel(n_valid));
        }
        if action_channels.is_empty() {
            return Err(FeatureError::NoActions);
        }
        if let Some(&bad) = action_channels
            .iter()
            .find(|&&c| c >= names.len() || kinds[c] == ChannelKind::Validity)
        {
            return Err(FeatureError::ActionChannel(bad));
        }
        Ok(Self {
            names,
            kinds,
            action_channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.names.len()
    }

    pub fn validity_channel(&self) -> usize {
        self.kinds
            .iter()
            .position(|k| *k == ChannelKind::Validity)
            .expect("layout validated")
    }
}

/// Per-agent features, channel-major `[C x T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub layout: ChannelLayout,
    pub n_frames: usize,
    pub data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(layout: ChannelLayout, n_frames: usize, data: Vec<f64>) -> Result<Self, FeatureError> {
        if data.len() != layout.channels() * n_frames {
            return Err(FeatureError::Channels {
                expected: layout.channels() * n_frames,
                found: data.len(),
            });
        }
        Ok(Self { layout, n_frames, data })
    }

    pub fn channels(&self) -> usize {
        self.layout.channels()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.n_frames..(c + 1) * self.n_frames]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let t = self.n_frames;
        &mut self.data[c * t..(c + 1) * t]
    }

    pub fn validity(&self) -> Vec<bool> {
        self.channel(self.layout.validity_channel())
            .iter()
            .map(|&v| v > 0.5)
            .collect()
    }

    /// Series of the declared action channels.
    pub fn actions(&self) -> Vec<&[f64]> {
        self.layout.action_channels.iter().map(|&c| self.channel(c)).collect()
    }

    /// Zeroes every channel of `frame` and clears its validity flag.
    pub fn invalidate(&mut self, frame: usize) {
        let t = self.n_frames;
        for c in 0..self.channels() {
            self.data[c * t + frame] = 0.0;
        }
    }
}

/// Indices of the named keypoints inside each agent's point list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointLayout {
    pub nose: usize,
    pub ear_left: usize,
    pub ear_right: usize,
    pub neck: usize,
    pub forepaw_left: usize,
    pub forepaw_right: usize,
    pub hindpaw_left: usize,
    pub hindpaw_right: usize,
    pub tail_base: usize,
    pub tail_mid: usize,
    pub tail_tip: usize,
}

impl Default for KeypointLayout {
    /// Twelve-point mouse layout: nose, left ear, right ear, neck, left
    /// forepaw, right forepaw, center back, left hindpaw, right hindpaw, tail
    /// base, tail middle, tail tip.
    fn default() -> Self {
        Self {
            nose: 0,
            ear_left: 1,
            ear_right: 2,
            neck: 3,
            forepaw_left: 4,
            forepaw_right: 5,
            hindpaw_left: 7,
            hindpaw_right: 8,
            tail_base: 9,
            tail_mid: 10,
            tail_tip: 11,
        }
    }
}

impl KeypointLayout {
    fn max_index(&self) -> usize {
        [
            self.nose,
            self.ear_left,
            self.ear_right,
            self.neck,
            self.forepaw_left,
            self.forepaw_right,
            self.hindpaw_left,
            self.hindpaw_right,
            self.tail_base,
            self.tail_mid,
            self.tail_tip,
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
    }

    fn paws(&self) -> [usize; 4] {
        [
            self.forepaw_left,
            self.forepaw_right,
            self.hindpaw_left,
            self.hindpaw_right,
        ]
    }
}

/// Raw tracked keypoints for every agent of one recording.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSequence {
    pub n_agents: usize,
    pub n_points: usize,
    pub n_frames: usize,
    /// `[A x P x 2 x T]`, row-major.
    pub coords: Vec<f64>,
    /// `[A x T]`.
    pub validity: Vec<bool>,
    pub frame_rate_hz: f64,
}

type P2 = (f64, f64);

impl KeypointSequence {
    pub fn new(
        n_agents: usize,
        n_points: usize,
        n_frames: usize,
        coords: Vec<f64>,
        validity: Vec<bool>,
        frame_rate_hz: f64,
    ) -> Result<Self, FeatureError> {
        if n_frames < 2 {
            return Err(FeatureError::TooShort(n_frames));
        }
        if !(frame_rate_hz > 0.0) {
            return Err(FeatureError::FrameRate);
        }
        let expected = n_agents * n_points * 2 * n_frames;
        if coords.len() != expected {
            return Err(FeatureError::KeypointLength {
                expected,
                found: coords.len(),
            });
        }
        if validity.len() != n_agents * n_frames {
            return Err(FeatureError::KeypointLength {
                expected: n_agents * n_frames,
                found: validity.len(),
            });
        }
        Ok(Self {
            n_agents,
            n_points,
            n_frames,
            coords,
            validity,
            frame_rate_hz,
        })
    }

    pub fn point(&self, agent: usize, point: usize, t: usize) -> P2 {
        let base = (agent * self.n_points + point) * 2 * self.n_frames;
        (self.coords[base + t], self.coords[base + self.n_frames + t])
    }

    pub fn is_valid(&self, agent: usize, t: usize) -> bool {
        self.validity[agent * self.n_frames + t]
    }
}

fn sub(a: P2, b: P2) -> P2 {
    (a.0 - b.0, a.1 - b.1)
}

fn mid(a: P2, b: P2) -> P2 {
    ((a.0 + b.0) * 0.5, (a.1 + b.1) * 0.5)
}

fn norm(a: P2) -> f64 {
    a.0.hypot(a.1)
}

fn heading(a: P2) -> f64 {
    a.1.atan2(a.0)
}

fn rotate(a: P2, angle: f64) -> P2 {
    let (s, c) = angle.sin_cos();
    (c * a.0 - s * a.1, s * a.0 + c * a.1)
}

/// Wraps an angle difference into `(-pi, pi]`.
fn wrap(a: f64) -> f64 {
    let mut x = (a + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

const CHANNELS: [(&str, ChannelKind); 24] = [
    ("head_speed", ChannelKind::Linear),
    ("head_dir_sin", ChannelKind::Angle),
    ("head_dir_cos", ChannelKind::Angle),
    ("head_angvel", ChannelKind::Linear),
    ("body_speed", ChannelKind::Linear),
    ("body_dir_sin", ChannelKind::Angle),
    ("body_dir_cos", ChannelKind::Angle),
    ("body_angvel", ChannelKind::Linear),
    ("head_body_sin", ChannelKind::Angle),
    ("head_body_cos", ChannelKind::Angle),
    ("forepaw_l_speed", ChannelKind::Linear),
    ("forepaw_r_speed", ChannelKind::Linear),
    ("hindpaw_l_speed", ChannelKind::Linear),
    ("hindpaw_r_speed", ChannelKind::Linear),
    ("forepaw_l_angvel", ChannelKind::Linear),
    ("forepaw_r_angvel", ChannelKind::Linear),
    ("hindpaw_l_angvel", ChannelKind::Linear),
    ("hindpaw_r_angvel", ChannelKind::Linear),
    ("spine_change", ChannelKind::Linear),
    ("tail_base_sin", ChannelKind::Angle),
    ("tail_base_cos", ChannelKind::Angle),
    ("tail_bend_sin", ChannelKind::Angle),
    ("tail_bend_cos", ChannelKind::Angle),
    ("valid", ChannelKind::Validity),
];

/// Channel layout produced by [`extract_agent_features`]. The velocity-type
/// channels are the action channels.
pub fn keypoint_channel_layout() -> ChannelLayout {
    let names = CHANNELS.iter().map(|(n, _)| n.to_string()).collect();
    let kinds = CHANNELS.iter().map(|(_, k)| *k).collect();
    let actions = vec![0, 3, 4, 7, 10, 11, 12, 13, 14, 15, 16, 17, 18];
    ChannelLayout::new(names, kinds, actions).expect("static layout is valid")
}

struct Pose {
    head: P2,
    head_angle: f64,
    body: P2,
    body_angle: f64,
    spine: f64,
    /// Paw positions in the body frame.
    paws: [P2; 4],
    tail_base_angle: f64,
    tail_bend: f64,
}

fn pose(seq: &KeypointSequence, kp: &KeypointLayout, a: usize, t: usize) -> Pose {
    let p = |i: usize| seq.point(a, i, t);
    let ears = mid(p(kp.ear_left), p(kp.ear_right));
    let head_angle = heading(sub(p(kp.nose), ears));
    let axis = sub(p(kp.neck), p(kp.tail_base));
    let body_angle = heading(axis);
    let body = mid(p(kp.neck), p(kp.tail_base));
    let paws = kp.paws().map(|i| rotate(sub(p(i), body), -body_angle));
    let tail1 = heading(sub(p(kp.tail_mid), p(kp.tail_base)));
    let tail2 = heading(sub(p(kp.tail_tip), p(kp.tail_mid)));
    Pose {
        head: ears,
        head_angle,
        body,
        body_angle,
        spine: norm(axis),
        paws,
        tail_base_angle: wrap(tail1 - body_angle),
        tail_bend: wrap(tail2 - tail1),
    }
}

/// Speed plus direction (relative to `frame_angle`) as `(speed, sin, cos)`.
fn polar(v: P2, frame_angle: f64) -> (f64, f64, f64) {
    let speed = norm(v);
    if speed < 1e-12 {
        return (0.0, 0.0, 1.0);
    }
    let (s, c) = wrap(heading(v) - frame_angle).sin_cos();
    (speed, s, c)
}

/// Feature channels for one agent (layout from [`keypoint_channel_layout`]).
pub fn extract_agent_features(
    seq: &KeypointSequence,
    agent: usize,
    kp: &KeypointLayout,
) -> Result<FeatureSequence, FeatureError> {
    if agent >= seq.n_agents {
        return Err(FeatureError::Agent {
            agent,
            agents: seq.n_agents,
        });
    }
    if kp.max_index() >= seq.n_points {
        return Err(FeatureError::Layout {
            needed: kp.max_index() + 1,
            found: seq.n_points,
        });
    }
    let layout = keypoint_channel_layout();
    let t_len = seq.n_frames;
    let fps = seq.frame_rate_hz;
    let mut out = FeatureSequence::new(layout, t_len, vec![0.0; CHANNELS.len() * t_len])?;
    let mut prev: Option<Pose> = None;
    for t in 0..t_len {
        if !seq.is_valid(agent, t) {
            prev = None;
            continue;
        }
        let cur = pose(seq, kp, agent, t);
        let Some(before) = prev.replace(pose(seq, kp, agent, t)) else {
            continue;
        };
        let finite = [cur.head.0, cur.head.1, cur.body.0, cur.body.1, cur.spine]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            prev = None;
            continue;
        }
        let head_v = sub(cur.head, before.head);
        let (hs, hsin, hcos) = polar((head_v.0 * fps, head_v.1 * fps), cur.head_angle);
        let body_v = sub(cur.body, before.body);
        let (bs, bsin, bcos) = polar((body_v.0 * fps, body_v.1 * fps), cur.body_angle);
        let (hb_s, hb_c) = wrap(cur.head_angle - cur.body_angle).sin_cos();
        let (tb_s, tb_c) = cur.tail_base_angle.sin_cos();
        let (tt_s, tt_c) = cur.tail_bend.sin_cos();
        let mut values = [0.0; 24];
        values[0] = hs;
        values[1] = hsin;
        values[2] = hcos;
        values[3] = wrap(cur.head_angle - before.head_angle) * fps;
        values[4] = bs;
        values[5] = bsin;
        values[6] = bcos;
        values[7] = wrap(cur.body_angle - before.body_angle) * fps;
        values[8] = hb_s;
        values[9] = hb_c;
        for i in 0..4 {
            values[10 + i] = norm(sub(cur.paws[i], before.paws[i])) * fps;
            values[14 + i] = wrap(heading(cur.paws[i]) - heading(before.paws[i])) * fps;
        }
        values[18] = (cur.spine - before.spine) * fps;
        values[19] = tb_s;
        values[20] = tb_c;
        values[21] = tt_s;
        values[22] = tt_c;
        values[23] = 1.0;
        for (c, v) in values.iter().enumerate() {
            out.data[c * t_len + t] = *v;
        }
    }
    Ok(out)
}

/// Distance between the body centers of two agents per frame.
pub fn body_center_distance(seq: &KeypointSequence, kp: &KeypointLayout, a: usize, b: usize) -> Vec<f64> {
    (0..seq.n_frames)
        .map(|t| {
            let ca = mid(seq.point(a, kp.neck, t), seq.point(a, kp.tail_base, t));
            let cb = mid(seq.point(b, kp.neck, t), seq.point(b, kp.tail_base, t));
            norm(sub(ca, cb))
        })
        .collect()
}

/// Per-channel statistics fitted on the pretraining sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels passed through unchanged (angles and the validity flag).
    pub passthrough: Vec<bool>,
}

pub const STD_FLOOR: f64 = 1e-6;

/// Mean and standard deviation of every channel over valid frames.
pub fn fit_normalization<'a, I>(sequences: I) -> Result<NormStats, FeatureError>
where
    I: IntoIterator<Item = &'a FeatureSequence>,
{
    let mut iter = sequences.into_iter().peekable();
    let first = iter.peek().ok_or(FeatureError::EmptyDataset)?;
    let layout = first.layout.clone();
    let c = layout.channels();
    let mut count = 0usize;
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let mut seqs = Vec::new();
    for seq in iter {
        if seq.channels() != c {
            return Err(FeatureError::Channels {
                expected: c,
                found: seq.channels(),
            });
        }
        let valid = seq.validity();
        count += valid.iter().filter(|&&v| v).count();
        for ch in 0..c {
            let s: f64 = seq
                .channel(ch)
                .iter()
                .zip(&valid)
                .filter(|(_, &v)| v)
                .map(|(x, _)| x)
                .sum();
            sum[ch] += s;
        }
        seqs.push((seq, valid));
    }
    if count == 0 {
        return Err(FeatureError::EmptyDataset);
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    // second pass for a numerically stable variance
    for (seq, valid) in &seqs {
        for ch in 0..c {
            let m = mean[ch];
            sq[ch] += seq
                .channel(ch)
                .iter()
                .zip(valid)
                .filter(|(_, &v)| v)
                .map(|(x, _)| (x - m) * (x - m))
                .sum::<f64>();
        }
    }
    let std = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
    let passthrough = layout.kinds.iter().map(|k| *k != ChannelKind::Linear).collect();
    Ok(NormStats { mean, std, passthrough })
}

/// Z-scores linear channels on valid frames; invalid frames stay exactly 0.
/// Not idempotent: applying twice re-centers an already centered sequence.
pub fn apply_normalization(seq: &FeatureSequence, stats: &NormStats) -> Result<FeatureSequence, FeatureError> {
    let c = seq.channels();
    if stats.mean.len() != c {
        return Err(FeatureError::Channels {
            expected: stats.mean.len(),
            found: c,
        });
    }
    let valid = seq.validity();
    let mut out = seq.clone();
    for ch in 0..c {
        if stats.passthrough[ch] {
            continue;
        }
        let m = stats.mean[ch];
        let s = stats.std[ch].max(STD_FLOOR);
        for (x, &v) in out.channel_mut(ch).iter_mut().zip(&valid) {
            *x = if v { (*x - m) / s } else { 0.0 };
        }
    }
    Ok(out)
}

/// Fraction of frames in a prediction window that must be valid.
pub const MIN_VALID_FRACTION_NUM: usize = 4;
pub const MIN_VALID_FRACTION_DEN: usize = 5;

/// True when at least `ceil(0.8 * len)` of frames `t+1 ..= t+len` are valid.
/// Windows running past the end of the sequence are rejected.
pub fn valid_prediction_window(validity: &[bool], t: usize, len: usize) -> bool {
    if len == 0 || t + len >= validity.len() {
        return false;
    }
    let needed = (MIN_VALID_FRACTION_NUM * len).div_ceil(MIN_VALID_FRACTION_DEN);
    let valid = validity[t + 1..=t + len].iter().filter(|&&v| v).count();
    valid >= needed
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// A plausible 12-point mouse pose at the origin facing +x.
    fn base_pose() -> Vec<P2> {
        vec![
            (3.0, 0.0),   // nose
            (2.0, 0.5),   // ear l
            (2.0, -0.5),  // ear r
            (1.5, 0.0),   // neck
            (1.2, 0.6),   // forepaw l
            (1.2, -0.6),  // forepaw r
            (0.0, 0.0),   // center back
            (-1.2, 0.7),  // hindpaw l
            (-1.2, -0.7), // hindpaw r
            (-1.5, 0.0),  // tail base
            (-2.5, 0.3),  // tail mid
            (-3.5, 0.8),  // tail tip
        ]
    }

    fn build(frames: &[Vec<P2>], valid: Option<Vec<bool>>, fps: f64) -> KeypointSequence {
        let t_len = frames.len();
        let p = frames[0].len();
        let mut coords = vec![0.0; p * 2 * t_len];
        for (t, pts) in frames.iter().enumerate() {
            for (i, &(x, y)) in pts.iter().enumerate() {
                coords[(i * 2) * t_len + t] = x;
                coords[(i * 2 + 1) * t_len + t] = y;
            }
        }
        KeypointSequence::new(1, p, t_len, coords, valid.unwrap_or(vec![true; t_len]), fps).unwrap()
    }

    fn wobble(t: usize) -> Vec<P2> {
        let f = t as f64;
        base_pose()
            .into_iter()
            .enumerate()
            .map(|(i, (x, y))| {
                let a = 0.05 * (f * 0.3 + i as f64).sin();
                let r = rotate((x + 0.1 * (f * 0.2 + i as f64).cos(), y), 0.02 * f);
                (r.0 + 0.4 * f + a, r.1 + 0.1 * f * f.sin())
            })
            .collect()
    }

    #[test]
    fn layout_has_one_validity_channel() {
        let l = keypoint_channel_layout();
        assert_eq!(l.channels(), 24);
        assert_eq!(l.kinds.iter().filter(|k| **k == ChannelKind::Validity).count(), 1);
        assert!(!l.action_channels.is_empty());
    }

    #[test]
    fn stationary_agent_has_zero_velocities() {
        let frames = vec![base_pose(); 10];
        let f = extract_agent_features(&build(&frames, None, 30.0), 0, &KeypointLayout::default()).unwrap();
        for &c in &f.layout.action_channels {
            assert!(f.channel(c).iter().all(|&v| v == 0.0), "channel {}", f.layout.names[c]);
        }
        assert_eq!(f.channel(23)[0], 0.0);
        assert!(f.channel(23)[1..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rigid_translation_speed() {
        let fps = 25.0;
        let step = (0.12, -0.05);
        let v = norm(step) * fps;
        let frames: Vec<Vec<P2>> = (0..12)
            .map(|t| {
                base_pose()
                    .into_iter()
                    .map(|(x, y)| (x + step.0 * t as f64, y + step.1 * t as f64))
                    .collect()
            })
            .collect();
        let f = extract_agent_features(&build(&frames, None, fps), 0, &KeypointLayout::default()).unwrap();
        for t in 1..12 {
            assert!((f.channel(4)[t] - v).abs() < 1e-9);
            assert!((f.channel(0)[t] - v).abs() < 1e-9);
            for c in [3, 7, 14, 15, 16, 17] {
                assert!(f.channel(c)[t].abs() < 1e-9, "{} at {t}", f.layout.names[c]);
            }
        }
    }

    #[test]
    fn invalid_frames_are_zeroed() {
        let frames: Vec<_> = (0..8).map(wobble).collect();
        let mut valid = vec![true; 8];
        valid[4] = false;
        let f = extract_agent_features(&build(&frames, Some(valid), 30.0), 0, &KeypointLayout::default()).unwrap();
        for t in [0, 4, 5] {
            for c in 0..f.channels() {
                assert_eq!(f.channel(c)[t], 0.0);
            }
        }
        assert_eq!(f.channel(23)[6], 1.0);
    }

    #[test]
    fn agent_out_of_range() {
        let frames = vec![base_pose(); 3];
        assert!(matches!(
            extract_agent_features(&build(&frames, None, 30.0), 1, &KeypointLayout::default()),
            Err(FeatureError::Agent { .. })
        ));
    }

    #[test]
    fn translation_and_rotation_invariance() {
        let frames: Vec<_> = (0..20).map(wobble).collect();
        let kp = KeypointLayout::default();
        let base = extract_agent_features(&build(&frames, None, 30.0), 0, &kp).unwrap();
        let shifted: Vec<Vec<P2>> = frames
            .iter()
            .map(|f| f.iter().map(|&(x, y)| (x + 17.0, y - 4.0)).collect())
            .collect();
        let rotated: Vec<Vec<P2>> = frames
            .iter()
            .map(|f| f.iter().map(|&p| rotate(p, 1.1)).collect())
            .collect();
        for other in [shifted, rotated] {
            let g = extract_agent_features(&build(&other, None, 30.0), 0, &kp).unwrap();
            for (a, b) in base.data.iter().zip(&g.data) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn angle_pairs_are_unit() {
        let frames: Vec<_> = (0..20).map(wobble).collect();
        let f = extract_agent_features(&build(&frames, None, 30.0), 0, &KeypointLayout::default()).unwrap();
        let valid = f.validity();
        for (s, c) in [(1, 2), (5, 6), (8, 9), (19, 20), (21, 22)] {
            for t in (0..20).filter(|&t| valid[t]) {
                let r = f.channel(s)[t].powi(2) + f.channel(c)[t].powi(2);
                assert!((r - 1.0).abs() < 1e-9);
            }
        }
    }

    fn simple_seq(values: &[f64], valid: &[bool]) -> FeatureSequence {
        let layout = ChannelLayout::new(
            vec!["x".into(), "a".into(), "valid".into()],
            vec![ChannelKind::Linear, ChannelKind::Angle, ChannelKind::Validity],
            vec![0],
        )
        .unwrap();
        let t = values.len();
        let mut data = values.to_vec();
        data.extend(values.iter().map(|v| v.sin()));
        data.extend(valid.iter().map(|&v| if v { 1.0 } else { 0.0 }));
        for (i, &v) in valid.iter().enumerate() {
            if !v {
                data[i] = 0.0;
                data[t + i] = 0.0;
            }
        }
        FeatureSequence::new(layout, t, data).unwrap()
    }

    #[test]
    fn zscore_definition() {
        let seq = simple_seq(&[3.0, 7.0, 3.0, 7.0], &[true; 4]);
        let stats = fit_normalization([&seq]).unwrap();
        assert_eq!(stats.mean[0], 5.0);
        assert_eq!(stats.std[0], 2.0);
        let n = apply_normalization(&seq, &stats).unwrap();
        assert_eq!(n.channel(0), &[-1.0, 1.0, -1.0, 1.0]);
        assert_eq!(n.channel(1), seq.channel(1));
        assert_eq!(n.channel(2), seq.channel(2));
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let seq = simple_seq(&[4.0; 6], &[true; 6]);
        let stats = fit_normalization([&seq]).unwrap();
        let n = apply_normalization(&seq, &stats).unwrap();
        assert!(n.channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_is_not_idempotent() {
        let seq = simple_seq(&[1.0, 2.0, 3.0, 10.0], &[true; 4]);
        let stats = fit_normalization([&seq]).unwrap();
        let once = apply_normalization(&seq, &stats).unwrap();
        let twice = apply_normalization(&once, &stats).unwrap();
        assert_ne!(once, twice);
    }

    #[test]
    fn invalid_frames_stay_zero_after_normalization() {
        let seq = simple_seq(&[1.0, 2.0, 3.0, 10.0], &[true, false, true, true]);
        let stats = fit_normalization([&seq]).unwrap();
        let n = apply_normalization(&seq, &stats).unwrap();
        for c in 0..3 {
            assert_eq!(n.channel(c)[1], 0.0);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        assert_eq!(fit_normalization(std::iter::empty()), Err(FeatureError::EmptyDataset));
    }

    #[test]
    fn prediction_window_threshold() {
        let all = vec![true; 40];
        assert!(valid_prediction_window(&all, 0, 30));
        let mut v = vec![true; 31];
        for slot in v.iter_mut().skip(1).take(6) {
            *slot = false;
        }
        assert!(valid_prediction_window(&v, 0, 30)); // 24 of 30
        v[7] = false;
        assert!(!valid_prediction_window(&v, 0, 30)); // 23 of 30
        assert!(!valid_prediction_window(&all, 10, 30));
        assert!(valid_prediction_window(&all, 9, 30));
    }

    proptest! {
        #[test]
        fn wrap_stays_in_range(a in -100.0f64..100.0) {
            let w = wrap(a);
            prop_assert!(w > -PI - 1e-12 && w <= PI + 1e-12);
            prop_assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }
}
