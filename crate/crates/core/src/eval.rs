//! Exhaustive oracle, rate/quality metrics, BD-rate, and policy evaluation
//! reports.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::codec::{encode_frame, run_episode_with, EpisodeResult, FrameEncoder, GopSpec, QP_MAX};
use crate::error::{Error, Result};
use crate::training::Agent;

/// Largest number of joint assignments the oracle will enumerate.
pub const ORACLE_LIMIT: f64 = 1e7;
pub const ORACLE_GRID: [u8; 6] = [17, 22, 27, 32, 37, 42];
const PEAK: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub rate: f64,
    pub psnr: f64,
}

impl RdPoint {
    pub fn new(rate: f64, psnr: f64) -> Result<Self> {
        if !(rate > 0.0) || !rate.is_finite() || !psnr.is_finite() {
            return Err(Error::Evaluation(format!("invalid R-D point ({rate}, {psnr})")));
        }
        Ok(Self { rate, psnr })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    /// QPs in display order.
    pub best_qps: Vec<u8>,
    pub best_total_mse: f64,
    pub bits_used: f64,
    pub feasible: bool,
}

struct Search<'a> {
    gop: &'a GopSpec,
    grid: &'a [u8],
    sequence: Vec<usize>,
    decoded: Vec<Option<f64>>,
    qps: Vec<u8>,
    best: Option<(f64, f64, Vec<u8>)>,
    cheapest: Option<(f64, f64, Vec<u8>)>,
}

/// `(mse, bits, qps)` ordering used for ties: lower mse, fewer bits, then
/// the lexicographically smaller display-order QP vector.
fn better(a: (f64, f64, &[u8]), b: &(f64, f64, Vec<u8>)) -> bool {
    a.0.total_cmp(&b.0)
        .then(a.1.total_cmp(&b.1))
        .then_with(|| a.2.cmp(&b.2[..]))
        .is_lt()
}

impl Search<'_> {
    fn visit(&mut self, position: usize, bits: f64, mse: f64) -> Result<()> {
        if position == self.sequence.len() {
            if bits <= self.gop.budget
                && self.best.as_ref().is_none_or(|b| better((mse, bits, &self.qps), b))
            {
                self.best = Some((mse, bits, self.qps.clone()));
            }
            // Minimum bits first, then the usual order.
            let key = (bits, mse, self.qps.clone());
            if self.cheapest.as_ref().is_none_or(|c| {
                key.0
                    .total_cmp(&c.0)
                    .then(key.1.total_cmp(&c.1))
                    .then_with(|| key.2.cmp(&c.2))
                    .is_lt()
            }) {
                self.cheapest = Some(key);
            }
            return Ok(());
        }
        let index = self.sequence[position];
        let frame = &self.gop.frames[index];
        for &qp in self.grid {
            let r = encode_frame(self.gop, frame, qp, &self.decoded)?;
            self.decoded[index] = Some(r.mse);
            self.qps[index] = qp;
            self.visit(position + 1, bits + r.bits, mse + r.mse)?;
        }
        self.decoded[index] = None;
        Ok(())
    }
}

/// Minimum total MSE over every joint grid assignment whose bits stay within
/// the budget. Infeasible instances report the minimum-bits assignment.
pub fn oracle_solve(gop: &GopSpec, grid: &[u8]) -> Result<OracleResult> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("QP grid must be non-empty and strictly ascending".into()));
    }
    if grid.iter().any(|&q| q > QP_MAX) {
        return Err(Error::Domain(format!("QP grid exceeds {QP_MAX}")));
    }
    let n = gop.frames.len();
    if (grid.len() as f64).powi(n as i32) > ORACLE_LIMIT {
        return Err(Error::Config(format!(
            "{} ^ {n} assignments exceed the oracle limit",
            grid.len()
        )));
    }
    let mut search = Search {
        gop,
        grid,
        sequence: gop.coding_sequence(),
        decoded: vec![None; n],
        qps: vec![0; n],
        best: None,
        cheapest: None,
    };
    search.visit(0, 0.0, 0.0)?;
    let (feasible, (mse, bits, qps)) = match (search.best, search.cheapest) {
        (Some(b), _) => (true, b),
        (None, Some(c)) => (false, (c.1, c.0, c.2)),
        (None, None) => unreachable!("grid is non-empty"),
    };
    Ok(OracleResult {
        best_qps: qps,
        best_total_mse: mse,
        bits_used: bits,
        feasible,
    })
}

/// Mean absolute deviation from budget, in percent.
pub fn rate_deviation(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Evaluation("rate deviation of zero episodes".into()));
    }
    let sum: f64 = results
        .iter()
        .map(|r| deviation_pct(r.total_bits, r.budget))
        .sum();
    Ok(sum / results.len() as f64)
}

pub fn deviation_pct(bits: f64, budget: f64) -> f64 {
    100.0 * (bits - budget).abs() / budget
}

pub fn mse_to_psnr(mse: f64) -> Result<f64> {
    if !(mse > 0.0) {
        return Err(Error::Domain(format!("PSNR of non-positive MSE {mse}")));
    }
    Ok(10.0 * (PEAK * PEAK / mse).log10())
}

/// Natural cubic spline through `(x, y)`, `x` strictly increasing.
struct Spline {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl Spline {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior second derivatives.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for j in 0..k {
                let i = j + 1;
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                diag[j] = 2.0 * (h0 + h1);
                upper[j] = h1;
                rhs[j] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for j in 1..k {
                let lower = x[j + 1] - x[j];
                let w = lower / diag[j - 1];
                diag[j] -= w * upper[j - 1];
                rhs[j] -= w * rhs[j - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for j in (0..k - 1).rev() {
                m[j + 1] = (rhs[j] - upper[j] * m[j + 2]) / diag[j];
            }
        }
        Self { x, y, m }
    }

    /// Antiderivative within segment `i`, relative to its left end.
    fn segment_primitive(&self, i: usize, t: f64) -> f64 {
        let (x0, x1) = (self.x[i], self.x[i + 1]);
        let h = x1 - x0;
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let a = self.y[i] / h - m0 * h / 6.0;
        let b = self.y[i + 1] / h - m1 * h / 6.0;
        let f = |x: f64| {
            -m0 * (x1 - x).powi(4) / (24.0 * h) + m1 * (x - x0).powi(4) / (24.0 * h)
                - a * (x1 - x).powi(2) / 2.0
                + b * (x - x0).powi(2) / 2.0
        };
        f(t) - f(x0)
    }

    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..self.x.len() - 1 {
            let a = lo.max(self.x[i]);
            let b = hi.min(self.x[i + 1]);
            if a < b {
                total += self.segment_primitive(i, b) - self.segment_primitive(i, a);
            }
        }
        total
    }
}

fn curve(points: &[RdPoint]) -> Result<Spline> {
    if points.len() < 4 {
        return Err(Error::Evaluation("BD-rate needs at least 4 points per curve".into()));
    }
    let mut pts = points.to_vec();
    for p in &pts {
        RdPoint::new(p.rate, p.psnr)?;
    }
    pts.sort_by(|a, b| a.rate.total_cmp(&b.rate));
    if pts.windows(2).any(|w| !(w[0].psnr < w[1].psnr)) {
        return Err(Error::Evaluation("PSNR must increase strictly with rate".into()));
    }
    Ok(Spline::new(
        pts.iter().map(|p| p.psnr).collect(),
        pts.iter().map(|p| p.rate.log10()).collect(),
    ))
}

/// Average rate difference of `test` against `anchor` at equal PSNR, in
/// percent; negative means `test` needs fewer bits.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    let a = curve(anchor)?;
    let t = curve(test)?;
    let lo = a.x[0].max(t.x[0]);
    let hi = a.x[a.x.len() - 1].min(t.x[t.x.len() - 1]);
    if !(hi > lo) {
        return Err(Error::Evaluation("R-D curves do not overlap in PSNR".into()));
    }
    let avg = (t.integral(lo, hi) - a.integral(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// A QP controller under evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    /// Every frame at the scenario's anchor QP.
    ConstantQp,
    BaseOnly(&'a Agent),
    /// Agent with the budget cut-off used in single-critic training.
    SingleCritic(&'a Agent),
    DualCritic(&'a Agent),
    Oracle(&'a [u8]),
}

impl Policy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::ConstantQp => "constant-qp",
            Policy::BaseOnly(_) => "base-only",
            Policy::SingleCritic(_) => "single-critic",
            Policy::DualCritic(_) => "dual-critic",
            Policy::Oracle(_) => "oracle",
        }
    }

    pub fn run<E: FrameEncoder + ?Sized>(&self, env: &mut E, gop: &GopSpec) -> Result<EpisodeResult> {
        match *self {
            Policy::ConstantQp => run_episode_with(env, gop, |v| Ok(i32::from(v.gop.anchor_qp))),
            Policy::BaseOnly(a) => a.rollout(env, gop, false, false),
            Policy::SingleCritic(a) => a.rollout(env, gop, true, true),
            Policy::DualCritic(a) => a.rollout(env, gop, true, false),
            Policy::Oracle(grid) => {
                let qps = oracle_solve(gop, grid)?.best_qps;
                run_episode_with(env, gop, |v| Ok(i32::from(qps[v.frame.index])))
            }
        }
    }
}

/// One (scenario, anchor) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub policy: String,
    pub difficulty: String,
    pub scenario_seed: u64,
    pub anchor_qp: u8,
    pub budget: f64,
    pub bits: f64,
    pub mse_total: f64,
    pub psnr: f64,
    pub deviation_pct: f64,
    pub over_budget: u8,
    /// Display-order QPs joined by `-`.
    pub qps: String,
}

impl ReportRow {
    pub fn rd_point(&self) -> Result<RdPoint> {
        RdPoint::new(self.bits, self.psnr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub policy: String,
    pub episodes: usize,
    pub rate_deviation: f64,
    pub mean_psnr: f64,
    pub mean_mse: f64,
    pub over_budget_episodes: usize,
    pub anchor_policy: Option<String>,
    /// Mean per-scenario BD-rate against `anchor_policy`.
    pub bd_rate: Option<f64>,
    /// Scenarios whose curves admitted a BD-rate.
    pub bd_rate_scenarios: usize,
}

impl Summary {
    pub fn from_rows(rows: &[ReportRow]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Evaluation("summary of an empty report".into()))?;
        let n = rows.len() as f64;
        Ok(Self {
            policy: first.policy.clone(),
            episodes: rows.len(),
            rate_deviation: rows.iter().map(|r| r.deviation_pct).sum::<f64>() / n,
            mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            mean_mse: rows.iter().map(|r| r.mse_total).sum::<f64>() / n,
            over_budget_episodes: rows.iter().filter(|r| r.over_budget == 1).count(),
            anchor_policy: None,
            bd_rate: None,
            bd_rate_scenarios: 0,
        })
    }
}

type ScenarioKey = (String, u64);

fn rd_curves(rows: &[ReportRow]) -> Result<BTreeMap<ScenarioKey, Vec<RdPoint>>> {
    let mut map: BTreeMap<ScenarioKey, Vec<RdPoint>> = BTreeMap::new();
    for r in rows {
        map.entry((r.difficulty.clone(), r.scenario_seed))
            .or_default()
            .push(r.rd_point()?);
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub results: Vec<EpisodeResult>,
    pub summary: Summary,
}

impl Report {
    /// Fill in the BD-rate against `anchor`, averaged over the scenarios
    /// where both curves are valid.
    pub fn compare_to(&mut self, anchor: &Report) -> Result<()> {
        let (bd, count) = mean_bd_rate(&anchor.rows, &self.rows)?;
        self.summary.anchor_policy = Some(anchor.summary.policy.clone());
        self.summary.bd_rate = bd;
        self.summary.bd_rate_scenarios = count;
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(&self.rows, out)
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }
}

/// Mean per-scenario BD-rate of `test` rows against `anchor` rows.
pub fn mean_bd_rate(anchor: &[ReportRow], test: &[ReportRow]) -> Result<(Option<f64>, usize)> {
    let a = rd_curves(anchor)?;
    let t = rd_curves(test)?;
    let mut values = Vec::new();
    for (key, tc) in &t {
        if let Some(ac) = a.get(key) {
            if let Ok(v) = bd_rate(ac, tc) {
                values.push(v);
            }
        }
    }
    if values.is_empty() {
        return Ok((None, 0));
    }
    Ok((Some(values.iter().sum::<f64>() / values.len() as f64), values.len()))
}

pub fn write_rows<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for r in rd.deserialize() {
        rows.push(r?);
    }
    Ok(rows)
}

/// Run `policy` on every scenario at every anchor QP, scenario-major.
pub fn evaluate_policy<E: FrameEncoder + ?Sized>(
    env: &mut E,
    policy: Policy<'_>,
    scenarios: &[GopSpec],
    anchors: &[u8],
) -> Result<Report> {
    if scenarios.is_empty() || anchors.is_empty() {
        return Err(Error::Evaluation("nothing to evaluate".into()));
    }
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for base in scenarios {
        for &a in anchors {
            let gop = base.with_anchor(a)?;
            let r = policy.run(env, &gop)?;
            let n = gop.frames.len() as f64;
            rows.push(ReportRow {
                policy: policy.name().to_string(),
                difficulty: gop.difficulty.to_string(),
                scenario_seed: gop.seed,
                anchor_qp: a,
                budget: gop.budget,
                bits: r.total_bits,
                mse_total: r.total_mse,
                psnr: mse_to_psnr(r.total_mse / n)?,
                deviation_pct: deviation_pct(r.total_bits, gop.budget),
                over_budget: u8::from(r.over_budget()),
                qps: r
                    .qps()
                    .iter()
                    .map(u8::to_string)
                    .collect::<Vec<_>>()
                    .join("-"),
            });
            results.push(r);
        }
    }
    Ok(Report {
        summary: Summary::from_rows(&rows)?,
        rows,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{build_gop, Difficulty, Simulator};

    fn curve_points() -> Vec<RdPoint> {
        [(100.0, 30.0), (180.0, 33.0), (320.0, 36.5), (600.0, 39.0)]
            .iter()
            .map(|&(r, p)| RdPoint::new(r, p).unwrap())
            .collect()
    }

    #[test]
    fn psnr_examples() {
        assert_eq!(mse_to_psnr(255.0 * 255.0).unwrap(), 0.0);
        assert!((mse_to_psnr(65.025).unwrap() - 30.0).abs() < 1e-12);
        assert!((mse_to_psnr(5.0).unwrap() - mse_to_psnr(10.0).unwrap() - 3.0103).abs() < 1e-4);
        assert!(matches!(mse_to_psnr(0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn bd_rate_uniform_shift() {
        let a = curve_points();
        let t: Vec<RdPoint> = a.iter().map(|p| RdPoint::new(p.rate * 0.9, p.psnr).unwrap()).collect();
        assert!((bd_rate(&a, &t).unwrap() + 10.0).abs() < 0.1);
        assert_eq!(bd_rate(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn bd_rate_rejects_bad_curves() {
        let a = curve_points();
        assert!(bd_rate(&a[..3], &a).is_err());
        let far: Vec<RdPoint> = a.iter().map(|p| RdPoint::new(p.rate, p.psnr + 50.0).unwrap()).collect();
        assert!(matches!(bd_rate(&a, &far), Err(Error::Evaluation(_))));
        let mut flat = a.clone();
        flat[2].psnr = flat[1].psnr;
        assert!(bd_rate(&flat, &a).is_err());
    }

    #[test]
    fn spline_reproduces_a_line() {
        let s = Spline::new(vec![0.0, 1.0, 3.0, 4.0], vec![1.0, 3.0, 7.0, 9.0]);
        assert!(s.m.iter().all(|m| m.abs() < 1e-12));
        assert!((s.integral(0.0, 4.0) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn deviation_examples() {
        let ep = |bits: f64| EpisodeResult {
            frames: vec![],
            total_bits: bits,
            total_mse: 1.0,
            budget: 100.0,
            gop_size: 1,
        };
        assert_eq!(rate_deviation(&[ep(100.0)]).unwrap(), 0.0);
        assert!((rate_deviation(&[ep(106.2)]).unwrap() - 6.2).abs() < 1e-9);
        assert!((rate_deviation(&[ep(110.0), ep(90.0)]).unwrap() - 10.0).abs() < 1e-9);
        assert!(rate_deviation(&[]).is_err());
    }

    #[test]
    fn oracle_guards() {
        let g = build_gop(16, 1, Difficulty::Slow).unwrap();
        assert!(matches!(oracle_solve(&g, &ORACLE_GRID), Err(Error::Config(_))));
        assert!(oracle_solve(&g, &[30, 20]).is_err());
        assert!(oracle_solve(&g, &[]).is_err());
    }

    #[test]
    fn oracle_beats_constant_qp() {
        let g = build_gop(4, 5, Difficulty::Slow).unwrap();
        let o = oracle_solve(&g, &ORACLE_GRID).unwrap();
        assert!(o.feasible);
        assert!(o.bits_used <= g.budget);
        let constant = crate::codec::run_episode(&g, |_| Ok(27)).unwrap();
        assert!(o.best_total_mse <= constant.total_mse);
    }

    #[test]
    fn report_shape_and_determinism() {
        let scenarios: Vec<GopSpec> = (0..3).map(|s| build_gop(4, s, Difficulty::Fast).unwrap()).collect();
        let mut sim = Simulator::new();
        let a = evaluate_policy(&mut sim, Policy::ConstantQp, &scenarios, &[22, 27, 32, 37]).unwrap();
        let b = evaluate_policy(&mut sim, Policy::ConstantQp, &scenarios, &[22, 27, 32, 37]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 12);
        assert!(a.summary.rate_deviation < 1e-9);
    }
}
