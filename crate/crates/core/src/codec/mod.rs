//! Episodic coding environment.
//!
//! A GOP is a small reference DAG (I anchor, one B midpoint, b leaves) coded
//! frame by frame. The in-process [`Simulator`] replaces a real encoder with
//! closed-form rate and distortion curves:
//!
//! ```text
//! q    = 2^((QP - 4) / 6)
//! e    = sigma2 + kappa * mean(decoded mse of references)
//! mse  = e * q^2 / (q^2 + theta)
//! bits = b * log2(1 + e / q^2)
//! ```
//!
//! so coarser quantization of a reference inflates the residual energy, and
//! therefore both the rate and the distortion, of every frame predicted from
//! it. [`external`] speaks the same contract to an encoder in a subprocess.

pub mod external;
pub mod protocol;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const QP_MIN: u8 = 0;
pub const QP_MAX: u8 = 51;
/// Constant-QP rollouts that define the four GOP budgets.
pub const ANCHOR_QPS: [u8; 4] = [22, 27, 32, 37];
pub const DEFAULT_ANCHOR_QP: u8 = 27;
pub const DEFAULT_KNEE_THETA: f64 = 1024.0;
pub const DEFAULT_KAPPA: f64 = 0.5;
pub const SUPPORTED_GOP_SIZES: [usize; 4] = [2, 4, 8, 16];
pub const MAX_MSE: f64 = 255.0 * 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalId {
    Tid0,
    Tid1,
    Tid2,
}

impl TemporalId {
    pub fn level(self) -> usize {
        match self {
            TemporalId::Tid0 => 0,
            TemporalId::Tid1 => 1,
            TemporalId::Tid2 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Slow,
    Fast,
}

impl Difficulty {
    /// Range of I-frame source activity (MSE units).
    pub fn sigma2_range(self) -> (f64, f64) {
        match self {
            Difficulty::Slow => (50.0, 200.0),
            Difficulty::Fast => (200.0, 2000.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Slow => "slow",
            Difficulty::Fast => "fast",
        }
    }
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slow" => Ok(Difficulty::Slow),
            "fast" => Ok(Difficulty::Fast),
            other => Err(Error::Config(format!("unknown difficulty '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    /// Display order within the GOP.
    pub index: usize,
    pub temporal_id: TemporalId,
    /// Display indices of the frames this one predicts from.
    pub references: Vec<usize>,
    /// Position in the encode sequence.
    pub coding_order: usize,
    pub sigma2: f64,
    pub rate_gain_b: f64,
    pub mean_luma: f64,
}

/// One episode's worth of frames plus its bit budget.
///
/// Scenario files are this struct serialized as JSON, field for field:
/// `seed`, `difficulty` (`"slow"`/`"fast"`), `gop_size`, `anchor_qp`,
/// `budget` (bits), `dependency_kappa`, `knee_theta`, and `frames` (display
/// order, each with `index`, `temporal_id` (`"tid0"`..`"tid2"`),
/// `references`, `coding_order`, `sigma2`, `rate_gain_b`, `mean_luma`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GopSpec {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub gop_size: usize,
    pub anchor_qp: u8,
    pub budget: f64,
    pub dependency_kappa: f64,
    pub knee_theta: f64,
    pub frames: Vec<FrameSpec>,
}

impl GopSpec {
    /// Display indices listed in coding order.
    pub fn coding_sequence(&self) -> Vec<usize> {
        let mut seq = vec![0; self.frames.len()];
        for f in &self.frames {
            seq[f.coding_order] = f.index;
        }
        seq
    }

    pub fn frame(&self, index: usize) -> Result<&FrameSpec> {
        self.frames
            .get(index)
            .ok_or_else(|| Error::Index(format!("frame {index} not in GOP of {}", self.frames.len())))
    }

    /// Copy of this scenario with the budget re-derived from a constant-QP
    /// rollout at `anchor_qp`.
    pub fn with_anchor(&self, anchor_qp: u8) -> Result<GopSpec> {
        quant_step(anchor_qp)?;
        let mut g = self.clone();
        g.anchor_qp = anchor_qp;
        g.budget = constant_qp_bits(&g, anchor_qp)?;
        if !(g.budget > 0.0) {
            return Err(Error::Config(format!(
                "anchor QP {anchor_qp} yields a non-positive budget"
            )));
        }
        Ok(g)
    }

    /// Structural and numeric invariants of a scenario.
    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n == 0 || n != self.gop_size {
            return Err(Error::Config(format!(
                "gop_size {} but {} frames",
                self.gop_size, n
            )));
        }
        if !(self.budget > 0.0) || !self.budget.is_finite() {
            return Err(Error::Config("budget must be positive".into()));
        }
        if !(self.knee_theta > 0.0) || !(self.dependency_kappa >= 0.0) {
            return Err(Error::Config("theta must be > 0 and kappa >= 0".into()));
        }
        let mut seen = vec![false; n];
        for (i, f) in self.frames.iter().enumerate() {
            if f.index != i {
                return Err(Error::Config(format!("frame at slot {i} has index {}", f.index)));
            }
            if f.coding_order >= n || std::mem::replace(&mut seen[f.coding_order], true) {
                return Err(Error::Config("coding_order is not a permutation".into()));
            }
            if !(f.sigma2 > 0.0) || !(f.rate_gain_b > 0.0) {
                return Err(Error::Config(format!("frame {i}: sigma2 and b must be positive")));
            }
            if (f.temporal_id == TemporalId::Tid0) != f.references.is_empty() {
                return Err(Error::Config(format!(
                    "frame {i}: only I-frames may lack references"
                )));
            }
        }
        for f in &self.frames {
            for &r in &f.references {
                let rf = self.frames.get(r).ok_or_else(|| {
                    Error::Config(format!("frame {} references missing frame {r}", f.index))
                })?;
                if rf.coding_order >= f.coding_order {
                    return Err(Error::DependencyOrder(format!(
                        "frame {} is coded before its reference {r}",
                        f.index
                    )));
                }
                if rf.temporal_id.level() >= f.temporal_id.level() {
                    return Err(Error::Config(format!(
                        "frame {} references frame {r} at the same or a lower level",
                        f.index
                    )));
                }
            }
        }
        Ok(())
    }
}

fn pyramid(gop_size: usize) -> Vec<(TemporalId, Vec<usize>, usize)> {
    // Display slot -> (tid, refs, coding position). The trailing I anchor of
    // the pyramid belongs to the next GOP, so every b-frame predicts from the
    // leading I and the midpoint B.
    let mut out = Vec::with_capacity(gop_size);
    out.push((TemporalId::Tid0, vec![], 0));
    if gop_size == 2 {
        out.push((TemporalId::Tid2, vec![0], 1));
        return out;
    }
    let mid = gop_size / 2;
    let mut next = 2;
    for i in 1..gop_size {
        if i == mid {
            out.push((TemporalId::Tid1, vec![0], 1));
        } else {
            out.push((TemporalId::Tid2, vec![0, mid], next));
            next += 1;
        }
    }
    out
}

/// Deterministic scenario for `(gop_size, seed, difficulty)`, budgeted at the
/// default anchor QP.
pub fn build_gop(gop_size: usize, seed: u64, difficulty: Difficulty) -> Result<GopSpec> {
    build_scenario(gop_size, seed, difficulty, DEFAULT_ANCHOR_QP)
}

/// Source activity per temporal level relative to the I-frame.
pub const LEVEL_ACTIVITY: [f64; 3] = [1.0, 0.5, 0.5];
/// Rate gain per temporal level relative to the I-frame.
pub const LEVEL_RATE_GAIN: [f64; 3] = [1.0, 2.5, 3.8];
pub const RATE_GAIN_MIN: f64 = 5.0;
pub const RATE_GAIN_MAX: f64 = 20.0;
const I_RATE_GAIN_MAX: f64 = 5.5;

/// Deterministic scenario budgeted at `anchor_qp`. The I-frame's activity is
/// drawn from the difficulty's range; inter frames carry a fixed fraction of
/// it and a larger rate gain.
pub fn build_scenario(
    gop_size: usize,
    seed: u64,
    difficulty: Difficulty,
    anchor_qp: u8,
) -> Result<GopSpec> {
    if !SUPPORTED_GOP_SIZES.contains(&gop_size) {
        return Err(Error::Config(format!(
            "gop_size {gop_size} unsupported; expected one of {SUPPORTED_GOP_SIZES:?}"
        )));
    }
    let salt = match difficulty {
        Difficulty::Slow => 0x51_0e,
        Difficulty::Fast => 0xfa_57,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt);
    let (lo, hi) = difficulty.sigma2_range();
    let sigma_base = rng.random_range(lo..hi);
    let b_base: f64 = rng.random_range(RATE_GAIN_MIN..I_RATE_GAIN_MAX);
    let luma_base: f64 = rng.random_range(40.0..200.0);

    let frames = pyramid(gop_size)
        .into_iter()
        .enumerate()
        .map(|(index, (temporal_id, references, coding_order))| {
            let level = temporal_id.level();
            let mut sigma2: f64 = sigma_base * rng.random_range(0.85..1.15);
            if level == 0 {
                sigma2 = sigma2.clamp(lo, hi);
            }
            sigma2 *= LEVEL_ACTIVITY[level];
            let rate_gain_b: f64 = (b_base * LEVEL_RATE_GAIN[level] * rng.random_range(0.95..1.05))
                .clamp(RATE_GAIN_MIN, RATE_GAIN_MAX);
            let mean_luma: f64 = (luma_base + rng.random_range(-8.0..8.0)).clamp(0.0, 255.0);
            FrameSpec {
                index,
                temporal_id,
                references,
                coding_order,
                sigma2,
                rate_gain_b,
                mean_luma,
            }
        })
        .collect();

    let mut gop = GopSpec {
        seed,
        difficulty,
        gop_size,
        anchor_qp,
        budget: 1.0,
        dependency_kappa: DEFAULT_KAPPA,
        knee_theta: DEFAULT_KNEE_THETA,
        frames,
    };
    gop = gop.with_anchor(anchor_qp)?;
    gop.validate()?;
    Ok(gop)
}

/// Quantizer step size, `2^((qp - 4) / 6)`.
pub fn quant_step(qp: u8) -> Result<f64> {
    if qp > QP_MAX {
        return Err(Error::Domain(format!("QP {qp} outside [0, {QP_MAX}]")));
    }
    Ok(((f64::from(qp) - 4.0) / 6.0).exp2())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodeResult {
    pub bits: f64,
    pub mse: f64,
    pub qp_used: u8,
}

impl EncodeResult {
    pub fn validate(&self) -> Result<()> {
        if !(self.bits.is_finite() && self.bits >= 0.0) {
            return Err(Error::Protocol(format!("bits {} must be finite and >= 0", self.bits)));
        }
        if !(self.mse.is_finite() && self.mse > 0.0 && self.mse <= MAX_MSE) {
            return Err(Error::Protocol(format!("mse {} outside (0, 255^2]", self.mse)));
        }
        if self.qp_used > QP_MAX {
            return Err(Error::Protocol(format!("qp_used {} outside [0, 51]", self.qp_used)));
        }
        Ok(())
    }
}

/// Residual energy of `frame` given the decoded MSE of its references.
/// References missing from `decoded` count as uncompressed (zero error).
pub fn residual_energy(gop: &GopSpec, frame: &FrameSpec, decoded: &[Option<f64>]) -> f64 {
    if frame.references.is_empty() {
        return frame.sigma2;
    }
    let sum: f64 = frame
        .references
        .iter()
        .map(|&r| decoded.get(r).copied().flatten().unwrap_or(0.0))
        .sum();
    frame.sigma2 + gop.dependency_kappa * sum / frame.references.len() as f64
}

/// Closed-form rate and distortion for coding `frame` at `qp`.
///
/// `decoded[i]` holds the decoded MSE of display frame `i` once coded.
pub fn encode_frame(
    gop: &GopSpec,
    frame: &FrameSpec,
    qp: u8,
    decoded: &[Option<f64>],
) -> Result<EncodeResult> {
    let q = quant_step(qp)?;
    for &r in &frame.references {
        if decoded.get(r).copied().flatten().is_none() {
            return Err(Error::DependencyOrder(format!(
                "frame {} needs decoded reference {r}",
                frame.index
            )));
        }
    }
    let e = residual_energy(gop, frame, decoded);
    let q2 = q * q;
    Ok(EncodeResult {
        bits: frame.rate_gain_b * (1.0 + e / q2).log2(),
        mse: e * q2 / (q2 + gop.knee_theta),
        qp_used: qp,
    })
}

/// Something that codes frames of one GOP at a time.
pub trait FrameEncoder {
    fn reset(&mut self, gop: &GopSpec) -> Result<()>;
    fn encode(&mut self, frame_index: usize, qp: u8) -> Result<EncodeResult>;
}

/// In-process encoder backed by [`encode_frame`].
#[derive(Debug, Clone, Default)]
pub struct Simulator {
    gop: Option<GopSpec>,
    decoded: Vec<Option<f64>>,
}

impl Simulator {
    pub fn new() -> Self {
        Self::default()
    }
}

impl FrameEncoder for Simulator {
    fn reset(&mut self, gop: &GopSpec) -> Result<()> {
        self.decoded = vec![None; gop.frames.len()];
        self.gop = Some(gop.clone());
        Ok(())
    }

    fn encode(&mut self, frame_index: usize, qp: u8) -> Result<EncodeResult> {
        let gop = self
            .gop
            .as_ref()
            .ok_or_else(|| Error::State("simulator used before reset".into()))?;
        let frame = gop.frame(frame_index)?;
        let r = encode_frame(gop, frame, qp, &self.decoded)?;
        self.decoded[frame_index] = Some(r.mse);
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodedFrame {
    pub index: usize,
    pub qp: u8,
    pub bits: f64,
    pub mse: f64,
    /// The policy asked for a QP outside `[0, 51]`.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    /// Coded frames in coding order.
    pub frames: Vec<CodedFrame>,
    pub total_bits: f64,
    pub total_mse: f64,
    pub budget: f64,
    pub gop_size: usize,
}

impl EpisodeResult {
    /// QPs in display order.
    pub fn qps(&self) -> Vec<u8> {
        let mut out = vec![0; self.frames.len()];
        for f in &self.frames {
            out[f.index] = f.qp;
        }
        out
    }

    pub fn any_clamped(&self) -> bool {
        self.frames.iter().any(|f| f.clamped)
    }

    pub fn over_budget(&self) -> bool {
        self.total_bits > self.budget
    }
}

/// What a policy sees before choosing the QP of the next frame.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeView<'a> {
    pub gop: &'a GopSpec,
    /// Coding position of the frame about to be coded.
    pub position: usize,
    pub frame: &'a FrameSpec,
    /// Decoded MSE per display index; `None` until coded.
    pub decoded: &'a [Option<f64>],
    pub bits_spent: f64,
    pub coded: &'a [CodedFrame],
}

/// Code `gop` with `encoder`, asking `policy` for each frame's QP in coding
/// order. Out-of-range QPs are clamped and flagged.
pub fn run_episode_with<E, P>(encoder: &mut E, gop: &GopSpec, mut policy: P) -> Result<EpisodeResult>
where
    E: FrameEncoder + ?Sized,
    P: FnMut(&EpisodeView<'_>) -> Result<i32>,
{
    encoder.reset(gop)?;
    let sequence = gop.coding_sequence();
    let mut decoded = vec![None; gop.frames.len()];
    let mut coded: Vec<CodedFrame> = Vec::with_capacity(sequence.len());
    let mut bits_spent = 0.0;
    for (position, &index) in sequence.iter().enumerate() {
        let frame = &gop.frames[index];
        let requested = policy(&EpisodeView {
            gop,
            position,
            frame,
            decoded: &decoded,
            bits_spent,
            coded: &coded,
        })?;
        let qp = requested.clamp(i32::from(QP_MIN), i32::from(QP_MAX)) as u8;
        let r = encoder.encode(index, qp)?;
        r.validate()?;
        decoded[index] = Some(r.mse);
        bits_spent += r.bits;
        coded.push(CodedFrame {
            index,
            qp,
            bits: r.bits,
            mse: r.mse,
            clamped: i32::from(qp) != requested,
        });
    }
    let total_mse = coded.iter().map(|f| f.mse).sum();
    Ok(EpisodeResult {
        total_bits: bits_spent,
        total_mse,
        frames: coded,
        budget: gop.budget,
        gop_size: gop.gop_size,
    })
}

pub fn run_episode<P>(gop: &GopSpec, policy: P) -> Result<EpisodeResult>
where
    P: FnMut(&EpisodeView<'_>) -> Result<i32>,
{
    run_episode_with(&mut Simulator::new(), gop, policy)
}

fn constant_qp_bits(gop: &GopSpec, qp: u8) -> Result<f64> {
    Ok(run_episode(gop, |_| Ok(i32::from(qp)))?.total_bits)
}

/// GOP-total MSE when every frame is coded at QP 0 and at QP 51.
pub fn gop_extremes(gop: &GopSpec) -> Result<(f64, f64)> {
    let lo = run_episode(gop, |_| Ok(i32::from(QP_MIN)))?.total_mse;
    let hi = run_episode(gop, |_| Ok(i32::from(QP_MAX)))?.total_mse;
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_frame_gop(sigma2: f64, b: f64) -> GopSpec {
        GopSpec {
            seed: 0,
            difficulty: Difficulty::Slow,
            gop_size: 1,
            anchor_qp: 27,
            budget: 100.0,
            dependency_kappa: 0.5,
            knee_theta: 1024.0,
            frames: vec![FrameSpec {
                index: 0,
                temporal_id: TemporalId::Tid0,
                references: vec![],
                coding_order: 0,
                sigma2,
                rate_gain_b: b,
                mean_luma: 128.0,
            }],
        }
    }

    #[test]
    fn quant_step_examples() {
        assert_eq!(quant_step(4).unwrap(), 1.0);
        assert!((quant_step(10).unwrap() - 2.0).abs() < 1e-15);
        assert!((quant_step(22).unwrap() - 8.0).abs() < 1e-13);
        assert!(matches!(quant_step(52), Err(Error::Domain(_))));
        for qp in 0..QP_MAX {
            assert!(quant_step(qp + 1).unwrap() > quant_step(qp).unwrap());
        }
    }

    #[test]
    fn gop16_structure() {
        let g = build_gop(16, 1, Difficulty::Slow).unwrap();
        assert_eq!(g.frames[0].temporal_id, TemporalId::Tid0);
        assert!(g.frames[0].references.is_empty());
        assert_eq!(g.frames[8].temporal_id, TemporalId::Tid1);
        for i in (1..8).chain(9..16) {
            assert_eq!(g.frames[i].temporal_id, TemporalId::Tid2, "frame {i}");
        }
        assert_eq!(g.frames[3].references, vec![0, 8]);
        assert_eq!(g.coding_sequence()[..2], [0, 8]);
    }

    #[test]
    fn gop2_structure() {
        let g = build_gop(2, 1, Difficulty::Fast).unwrap();
        assert_eq!(g.frames[0].temporal_id, TemporalId::Tid0);
        assert!(g.frames[0].references.is_empty());
        assert_eq!(g.frames[1].temporal_id, TemporalId::Tid2);
        assert_eq!(g.frames[1].references, vec![0]);
    }

    #[test]
    fn build_gop_is_deterministic_and_rejects_odd_sizes() {
        assert_eq!(
            build_gop(8, 42, Difficulty::Fast).unwrap(),
            build_gop(8, 42, Difficulty::Fast).unwrap()
        );
        assert_ne!(
            build_gop(8, 42, Difficulty::Fast).unwrap(),
            build_gop(8, 43, Difficulty::Fast).unwrap()
        );
        for bad in [0, 1, 3, 6, 32] {
            assert!(matches!(build_gop(bad, 0, Difficulty::Slow), Err(Error::Config(_))));
        }
    }

    #[test]
    fn difficulty_ranges_respected() {
        for seed in 0..50 {
            for d in [Difficulty::Slow, Difficulty::Fast] {
                let (lo, hi) = d.sigma2_range();
                let g = build_gop(16, seed, d).unwrap();
                assert!(g.frames[0].sigma2 >= lo && g.frames[0].sigma2 <= hi);
                for f in &g.frames {
                    assert!(f.sigma2 > 0.0 && f.sigma2 <= hi);
                    assert!((5.0..=20.0).contains(&f.rate_gain_b));
                }
            }
        }
    }

    #[test]
    fn encode_intra_example() {
        let g = single_frame_gop(100.0, 10.0);
        let r = encode_frame(&g, &g.frames[0], 22, &[None]).unwrap();
        let mse = 100.0 * 64.0 / 1088.0;
        let bits = 10.0 * (1.0f64 + 100.0 / 64.0).log2();
        assert!((r.mse - mse).abs() < 1e-12 && (r.mse - 5.882).abs() < 1e-3);
        assert!((r.bits - bits).abs() < 1e-12 && (r.bits - 13.576).abs() < 1e-3);

        let r = encode_frame(&g, &g.frames[0], 51, &[None]).unwrap();
        assert!((r.mse - 98.07).abs() < 0.01, "{}", r.mse);
        assert!((r.bits - 0.0277).abs() < 1e-4, "{}", r.bits);
    }

    #[test]
    fn dependent_frame_energy_and_monotonicity() {
        let mut g = build_gop(2, 0, Difficulty::Slow).unwrap();
        g.frames[1].sigma2 = 50.0;
        let d_ref = 100.0 * 64.0 / 1088.0;
        let decoded = [Some(d_ref), None];
        let e = residual_energy(&g, &g.frames[1], &decoded);
        assert!((e - 52.941).abs() < 1e-3);
        let mut prev = encode_frame(&g, &g.frames[1], 0, &decoded).unwrap();
        for qp in 1..=QP_MAX {
            let r = encode_frame(&g, &g.frames[1], qp, &decoded).unwrap();
            assert!(r.bits <= prev.bits && r.mse >= prev.mse, "qp {qp}");
            prev = r;
        }
    }

    #[test]
    fn missing_reference_is_dependency_error() {
        let g = build_gop(4, 3, Difficulty::Slow).unwrap();
        let err = encode_frame(&g, &g.frames[1], 30, &[Some(1.0), None, None, None]).unwrap_err();
        assert!(matches!(err, Error::DependencyOrder(_)));
    }

    #[test]
    fn episode_totals_match_closed_form() {
        let g = build_gop(2, 5, Difficulty::Slow).unwrap();
        let ep = run_episode(&g, |_| Ok(22)).unwrap();
        let i = encode_frame(&g, &g.frames[0], 22, &[None, None]).unwrap();
        let b = encode_frame(&g, &g.frames[1], 22, &[Some(i.mse), None]).unwrap();
        assert_eq!(ep.total_bits, i.bits + b.bits);
        assert_eq!(ep.total_mse, i.mse + b.mse);
        assert_eq!(ep, run_episode(&g, |_| Ok(22)).unwrap());
    }

    #[test]
    fn extremes_bracket_everything() {
        let g = build_gop(4, 9, Difficulty::Fast).unwrap();
        let lo = run_episode(&g, |_| Ok(0)).unwrap();
        let hi = run_episode(&g, |_| Ok(51)).unwrap();
        assert!(lo.total_mse < hi.total_mse);
        assert!(lo.total_bits > hi.total_bits);
        assert_eq!(gop_extremes(&g).unwrap(), (lo.total_mse, hi.total_mse));
    }

    #[test]
    fn out_of_range_policy_is_clamped_and_flagged() {
        let g = build_gop(4, 2, Difficulty::Slow).unwrap();
        let ep = run_episode(&g, |v| Ok(if v.position == 0 { 70 } else { -3 })).unwrap();
        assert_eq!(ep.qps(), vec![51, 0, 0, 0]);
        assert!(ep.frames.iter().all(|f| f.clamped));
        let ok = run_episode(&g, |_| Ok(30)).unwrap();
        assert!(!ok.any_clamped());
    }

    #[test]
    fn anchor_budgets_decrease_with_qp() {
        let g = build_gop(8, 4, Difficulty::Slow).unwrap();
        let budgets: Vec<f64> = ANCHOR_QPS
            .iter()
            .map(|&a| g.with_anchor(a).unwrap().budget)
            .collect();
        assert!(budgets.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(g.budget, budgets[1]);
    }

    #[test]
    fn scenario_json_round_trip() {
        let g = build_gop(16, 77, Difficulty::Fast).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        let back: GopSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, g);
        assert!(text.contains("\"difficulty\":\"fast\""));
        assert!(text.contains("\"temporal_id\":\"tid1\""));
    }
}
