//! State encoding and reward functions.
//!
//! The state is a fixed 14-wide vector:
//!
//! | slot  | content                                               |
//! |-------|-------------------------------------------------------|
//! | 0, 1  | intra mean, intra variance of the current frame       |
//! | 2, 3  | inter (residual) mean, variance of the current frame  |
//! | 4..8  | the same four averaged over frames not yet coded      |
//! | 8     | remaining bits as a fraction of the GOP budget        |
//! | 9     | remaining frames / GOP size                           |
//! | 10..13| temporal id one-hot (Tid0, Tid1, Tid2)                |
//! | 13    | GOP budget / (GOP size * [`BITS_SCALE`])              |
//!
//! Means are scaled to roughly `[0, 1]`; variances enter as
//! `log10(1 + var) / 4`. Residual statistics use the decoded MSE of coded
//! references and treat uncoded references as uncompressed.

use serde::{Deserialize, Serialize};

use crate::codec::{residual_energy, GopSpec, TemporalId};
use crate::error::{Error, Result};

pub const STATE_WIDTH: usize = 14;
/// Bits per frame used to normalize the GOP budget feature.
pub const BITS_SCALE: f64 = 64.0;

pub const SLOT_REMAINING_BITS: usize = 8;
pub const SLOT_REMAINING_FRAMES: usize = 9;
pub const SLOT_TID: usize = 10;
pub const SLOT_TARGET_BITS: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector([f64; STATE_WIDTH]);

impl StateVector {
    pub fn from_array(values: [f64; STATE_WIDTH]) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn remaining_bits_pct(&self) -> f64 {
        self.0[SLOT_REMAINING_BITS]
    }

    pub fn remaining_frames_norm(&self) -> f64 {
        self.0[SLOT_REMAINING_FRAMES]
    }

    pub fn tid_one_hot(&self) -> [f64; 3] {
        [self.0[SLOT_TID], self.0[SLOT_TID + 1], self.0[SLOT_TID + 2]]
    }

    pub fn target_bits_norm(&self) -> f64 {
        self.0[SLOT_TARGET_BITS]
    }
}

fn var_feature(v: f64) -> f64 {
    (1.0 + v.max(0.0)).log10() / 4.0
}

/// `[intra_mean, intra_var, inter_mean, inter_var]` for one frame.
fn frame_features(gop: &GopSpec, index: usize, decoded: &[Option<f64>]) -> [f64; 4] {
    let f = &gop.frames[index];
    let e = residual_energy(gop, f, decoded);
    // Mean absolute value of a zero-mean Gaussian residual with variance e.
    let residual_mean = (2.0 * e / std::f64::consts::PI).sqrt();
    [
        f.mean_luma / 255.0,
        var_feature(f.sigma2),
        residual_mean / 64.0,
        var_feature(e),
    ]
}

fn tid_slots(tid: TemporalId) -> [f64; 3] {
    let mut one_hot = [0.0; 3];
    one_hot[tid.level()] = 1.0;
    one_hot
}

/// Encode the state seen before coding the frame at coding position `position`.
pub fn extract_state(
    gop: &GopSpec,
    position: usize,
    decoded: &[Option<f64>],
    bits_spent: f64,
) -> Result<StateVector> {
    let n = gop.frames.len();
    if position >= n {
        return Err(Error::Index(format!(
            "coding position {position} outside GOP of {n} frames"
        )));
    }
    if decoded.len() != n {
        return Err(Error::Shape(format!(
            "decoded map has {} entries for {n} frames",
            decoded.len()
        )));
    }
    let sequence = gop.coding_sequence();
    let current = sequence[position];
    let own = frame_features(gop, current, decoded);

    let remaining = &sequence[position..];
    let mut avg = [0.0; 4];
    for &i in remaining {
        for (a, v) in avg.iter_mut().zip(frame_features(gop, i, decoded)) {
            *a += v;
        }
    }
    avg.iter_mut().for_each(|a| *a /= remaining.len() as f64);

    let mut v = [0.0; STATE_WIDTH];
    v[..4].copy_from_slice(&own);
    v[4..8].copy_from_slice(&avg);
    v[SLOT_REMAINING_BITS] = (gop.budget - bits_spent) / gop.budget;
    v[SLOT_REMAINING_FRAMES] = remaining.len() as f64 / gop.gop_size as f64;
    v[SLOT_TID..SLOT_TID + 3].copy_from_slice(&tid_slots(gop.frames[current].temporal_id));
    v[SLOT_TARGET_BITS] = gop.budget / (gop.gop_size as f64 * BITS_SCALE);
    Ok(StateVector(v))
}

/// State after the last frame of the GOP. Frame slots are zero and the
/// temporal id points at the next GOP's I-frame; it is only ever used behind
/// a terminal flag.
pub fn terminal_state(gop: &GopSpec, bits_spent: f64) -> StateVector {
    let mut v = [0.0; STATE_WIDTH];
    v[SLOT_REMAINING_BITS] = (gop.budget - bits_spent) / gop.budget;
    v[SLOT_REMAINING_FRAMES] = 0.0;
    v[SLOT_TID..SLOT_TID + 3].copy_from_slice(&tid_slots(TemporalId::Tid0));
    v[SLOT_TARGET_BITS] = gop.budget / (gop.gop_size as f64 * BITS_SCALE);
    StateVector(v)
}

/// Per-frame distortion reward,
/// `-(mse_i - MSE_QP0) / ((MSE_QP51 - MSE_QP0) * gop_size)`, where the two
/// extremes are GOP totals.
pub fn distortion_reward(
    mse_i: f64,
    mse_qp0_total: f64,
    mse_qp51_total: f64,
    gop_size: usize,
) -> Result<f64> {
    let span = mse_qp51_total - mse_qp0_total;
    if !(span > 0.0) {
        return Err(Error::Config(format!(
            "degenerate distortion extremes: QP0 {mse_qp0_total}, QP51 {mse_qp51_total}"
        )));
    }
    if gop_size == 0 {
        return Err(Error::Config("gop_size must be >= 1".into()));
    }
    Ok(-(mse_i - mse_qp0_total) / (span * gop_size as f64))
}

/// Terminal rate reward `-|budget - total| / budget`.
pub fn rate_reward(budget: f64, total_bits: f64) -> Result<f64> {
    if !(budget > 0.0) {
        return Err(Error::Config(format!("budget must be positive, got {budget}")));
    }
    Ok(-(budget - total_bits).abs() / budget)
}

/// Distortion normalizer of the single-critic baseline: the per-frame share
/// of the GOP's extreme-QP MSE span.
pub fn single_critic_norm(mse_qp0_total: f64, mse_qp51_total: f64, gop_size: usize) -> Result<f64> {
    let span = mse_qp51_total - mse_qp0_total;
    if !(span > 0.0) || gop_size == 0 {
        return Err(Error::Config("degenerate single-critic normalizer".into()));
    }
    Ok(span / gop_size as f64)
}

/// Combined reward of the single-critic baseline:
/// `-mse_i / d_norm`, plus `-lambda * (budget - total) / budget` on the
/// terminal step.
pub fn single_critic_reward(
    mse_i: f64,
    d_norm: f64,
    budget: f64,
    total_bits: f64,
    lambda: f64,
    terminal: bool,
) -> Result<f64> {
    if !(d_norm > 0.0) {
        return Err(Error::Config(format!("d_norm must be positive, got {d_norm}")));
    }
    if !(budget > 0.0) {
        return Err(Error::Config(format!("budget must be positive, got {budget}")));
    }
    let distortion = -mse_i / d_norm;
    if terminal {
        Ok(distortion - lambda * (budget - total_bits) / budget)
    } else {
        Ok(distortion)
    }
}
