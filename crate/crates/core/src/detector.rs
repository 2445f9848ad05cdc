//! Temporal score-dynamics artifact detection.
//!
//! Scores are banked over a window `T_d ≥ t ≥ T_c`. For every consecutive pair the
//! weighted change `|w(t_b)s_b − w(t_a)s_a|` is thresholded against
//! `τ = max(k·MAD(dynamics), mean |w·s| over the bank)` and the flagged pixels of all
//! pairs are accumulated into one mask.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ScoreField, Shape, SpatialMask};
use crate::schedule::{nearest_step, weight_from_alpha_bar, NoiseSchedule, StepGrid};
use crate::stats::{mad, mean};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanBankMode {
    #[default]
    MeanAbsWeighted,
    MeanAbsRaw,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelReduce {
    #[default]
    L2,
    /// Per-channel test; a pixel is flagged if any channel exceeds τ.
    Union,
}

impl FromStr for MeanBankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_abs_weighted" | "weighted" => Ok(Self::MeanAbsWeighted),
            "mean_abs_raw" | "raw" => Ok(Self::MeanAbsRaw),
            _ => Err(Error::Config(format!("unknown mean_bank_mode '{s}'"))),
        }
    }
}

impl FromStr for ChannelReduce {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2_over_channels" | "l2" => Ok(Self::L2),
            "union_over_channels" | "union" => Ok(Self::Union),
            _ => Err(Error::Config(format!("unknown channel_reduce '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub t_detect_start: u32,
    pub t_correct: u32,
    pub mad_multiplier: f64,
    pub mean_bank_mode: MeanBankMode,
    pub channel_reduce: ChannelReduce,
    pub dilation_radius: usize,
}

pub const DEFAULT_TD_FRAC: f64 = 0.8;
pub const DEFAULT_TC_FRAC: f64 = 0.48;

impl DetectorConfig {
    /// Default knobs with the window placed at `t_d`, `t_c`.
    pub fn with_window(t_detect_start: u32, t_correct: u32) -> Self {
        Self {
            t_detect_start,
            t_correct,
            mad_multiplier: 1.0,
            mean_bank_mode: MeanBankMode::default(),
            channel_reduce: ChannelReduce::default(),
            dilation_radius: 1,
        }
    }

    /// Default config on `grid` with the window at the default fractions of `t_total`.
    pub fn default_for(grid: &StepGrid, t_total: u32) -> Result<Self> {
        let (td, tc) = resolve_window(grid.timesteps(), t_total, DEFAULT_TD_FRAC, DEFAULT_TC_FRAC)?;
        Ok(Self::with_window(td, tc))
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_correct < 1 || self.t_detect_start <= self.t_correct {
            return Err(Error::Config(format!(
                "detector window requires T_d > T_c >= 1 (got T_d={}, T_c={})",
                self.t_detect_start, self.t_correct
            )));
        }
        if !(self.mad_multiplier > 0.0 && self.mad_multiplier.is_finite()) {
            return Err(Error::Config("mad_multiplier must be positive".into()));
        }
        Ok(())
    }
}

/// Map window fractions onto steps of `steps` (nearest, ties to the larger step).
pub fn resolve_window(steps: &[u32], t_total: u32, td_frac: f64, tc_frac: f64) -> Result<(u32, u32)> {
    for (name, f) in [("T_d/T", td_frac), ("T_c/T", tc_frac)] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("{name} must lie in (0, 1], got {f}")));
        }
    }
    if td_frac <= tc_frac {
        return Err(Error::Config(format!(
            "T_d/T ({td_frac}) must exceed T_c/T ({tc_frac})"
        )));
    }
    if steps.is_empty() {
        return Err(Error::Usage("no steps to place the window on".into()));
    }
    let td = nearest_step(steps, td_frac * f64::from(t_total));
    let tc = nearest_step(steps, tc_frac * f64::from(t_total));
    if td <= tc {
        return Err(Error::Config(format!(
            "T_d/T={td_frac} and T_c/T={tc_frac} collapse onto the same step {td}"
        )));
    }
    Ok((td, tc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub t: u32,
    pub alpha_bar: f64,
    pub field: ScoreField,
}

impl BankEntry {
    pub fn weight(&self) -> f64 {
        weight_from_alpha_bar(self.alpha_bar)
    }
}

/// Ordered scores over the detection window, strictly decreasing in t.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreBank {
    entries: Vec<BankEntry>,
}

impl ScoreBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: u32, alpha_bar: f64, field: ScoreField) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if t >= last.t {
                return Err(Error::Usage(format!(
                    "bank steps must decrease: {t} after {}",
                    last.t
                )));
            }
            last.field.shape().check(&field.shape())?;
        }
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(Error::Numeric(format!("alpha_bar {alpha_bar} at t={t}")));
        }
        self.entries.push(BankEntry { t, alpha_bar, field });
        Ok(())
    }

    /// Bank the frames of `(t, score)` that fall inside `[t_c, t_d]`, with ᾱ from `alpha_bar`.
    pub fn from_frames<'a>(
        frames: impl IntoIterator<Item = (u32, f64, &'a ScoreField)>,
        t_detect_start: u32,
        t_correct: u32,
    ) -> Result<Self> {
        let mut bank = Self::new();
        for (t, ab, s) in frames {
            if (t_correct..=t_detect_start).contains(&t) {
                bank.push(t, ab, s.clone())?;
            }
        }
        Ok(bank)
    }

    pub fn from_trajectory(
        steps: &[u32],
        scores: &[ScoreField],
        sched: &NoiseSchedule,
        cfg: &DetectorConfig,
    ) -> Result<Self> {
        let mut frames = Vec::with_capacity(steps.len());
        for (&t, s) in steps.iter().zip(scores) {
            frames.push((t, sched.alpha_bar(t)?, s));
        }
        Self::from_frames(frames, cfg.t_detect_start, cfg.t_correct)
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn shape(&self) -> Option<Shape> {
        self.entries.first().map(|e| e.field.shape())
    }

    pub fn steps(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.t).collect()
    }

    /// Every field multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| BankEntry {
                    t: e.t,
                    alpha_bar: e.alpha_bar,
                    field: e.field.scale(c),
                })
                .collect(),
        }
    }

    /// Bank truncated to its first `n` entries.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            entries: self.entries[..n.min(self.entries.len())].to_vec(),
        }
    }
}

/// Per-pixel `|b − a|` with channels reduced; `a`, `b` are already weighted.
pub fn weighted_delta_grid(a: &Image, b: &Image, reduce: ChannelReduce) -> Result<Vec<f64>> {
    a.shape().check(&b.shape())?;
    let shape = a.shape();
    Ok(delta_grid(shape, |i| b.data()[i] - a.data()[i], reduce))
}

fn delta_grid(shape: Shape, diff: impl Fn(usize) -> f64, reduce: ChannelReduce) -> Vec<f64> {
    let px = shape.pixels();
    if shape.c == 1 {
        return (0..px).map(|p| diff(p).abs()).collect();
    }
    (0..px)
        .map(|p| {
            let per = (0..shape.c).map(|c| diff(c * px + p));
            match reduce {
                ChannelReduce::L2 => per.map(|d| d * d).sum::<f64>().sqrt(),
                ChannelReduce::Union => per.map(f64::abs).fold(0.0, f64::max),
            }
        })
        .collect()
}

/// Weighted dynamics of the `k`-th consecutive pair of the bank.
pub fn weighted_dynamics(bank: &ScoreBank, k: usize, cfg: &DetectorConfig) -> Result<Vec<f64>> {
    if bank.len() < 2 {
        return Err(Error::Usage(format!(
            "dynamics need at least 2 banked scores, have {}",
            bank.len()
        )));
    }
    if k + 1 >= bank.len() {
        return Err(Error::Index {
            t: k as u32,
            max: (bank.len() - 2) as u32,
        });
    }
    let (a, b) = (&bank.entries[k], &bank.entries[k + 1]);
    let (wa, wb) = (a.weight(), b.weight());
    let (da, db) = (a.field.data(), b.field.data());
    Ok(delta_grid(
        a.field.shape(),
        |i| wb * db[i] - wa * da[i],
        cfg.channel_reduce,
    ))
}

/// Mean of |w(t)·s| (or |s|) over every entry and element of the bank.
pub fn bank_mean(bank: &ScoreBank, mode: MeanBankMode) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for e in &bank.entries {
        let w = match mode {
            MeanBankMode::MeanAbsWeighted => e.weight(),
            MeanBankMode::MeanAbsRaw => 1.0,
        };
        sum += e.field.data().iter().map(|v| (w * v).abs()).sum::<f64>();
        n += e.field.data().len();
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn adaptive_threshold(dynamics: &[f64], bank: &ScoreBank, cfg: &DetectorConfig) -> f64 {
    threshold_from(dynamics, bank_mean(bank, cfg.mean_bank_mode), cfg.mad_multiplier)
}

fn threshold_from(dynamics: &[f64], bank_mean: f64, multiplier: f64) -> f64 {
    (multiplier * mad(dynamics)).max(bank_mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStat {
    pub t_a: u32,
    pub t_b: u32,
    pub tau: f64,
    pub mad: f64,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactMask {
    /// Accumulated mask after dilation.
    pub mask: SpatialMask,
    /// Accumulated mask before dilation.
    pub core: SpatialMask,
    /// Number of pairs whose (dilated) flag set covers each pixel, row-major.
    pub provenance: Vec<u32>,
    pub pairs: Vec<PairStat>,
    /// Pre-dilation flags of each pair, in bank order.
    pub pair_flags: Vec<SpatialMask>,
    pub bank_mean: f64,
}

impl ArtifactMask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            mask: SpatialMask::empty(h, w),
            core: SpatialMask::empty(h, w),
            provenance: vec![0; h * w],
            pairs: Vec::new(),
            pair_flags: Vec::new(),
            bank_mean: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Pre-dilation mask after accumulating the first `k` pairs.
    pub fn accumulated(&self, k: usize) -> SpatialMask {
        let mut m = SpatialMask::empty(self.core.height(), self.core.width());
        for f in self.pair_flags.iter().take(k) {
            m.union_with(f);
        }
        m
    }

    /// τ of the last pair processed.
    pub fn last_tau(&self) -> Option<f64> {
        self.pairs.last().map(|p| p.tau)
    }
}

pub fn detect(bank: &ScoreBank, cfg: &DetectorConfig) -> Result<ArtifactMask> {
    if bank.len() < 2 {
        return Err(Error::Usage(format!(
            "detection window holds {} banked scores, need at least 2",
            bank.len()
        )));
    }
    let shape = bank.shape().expect("non-empty bank");
    let (h, w) = (shape.h, shape.w);
    let mean_term = bank_mean(bank, cfg.mean_bank_mode);
    let mut out = ArtifactMask::empty(h, w);
    out.bank_mean = mean_term;

    for k in 0..bank.len() - 1 {
        let dyn_k = weighted_dynamics(bank, k, cfg)?;
        let spread = mad(&dyn_k);
        let tau = threshold_from(&dyn_k, mean_term, cfg.mad_multiplier);
        let bits: Vec<bool> = match (cfg.channel_reduce, shape.c) {
            (ChannelReduce::Union, c) if c > 1 => union_flags(bank, k, shape, tau),
            _ => dyn_k.iter().map(|&d| d > tau).collect(),
        };
        let flagged = SpatialMask::from_bits(h, w, bits)?;
        let grown = flagged.dilate(cfg.dilation_radius);
        for p in grown.indices() {
            out.provenance[p] += 1;
        }
        out.pairs.push(PairStat {
            t_a: bank.entries[k].t,
            t_b: bank.entries[k + 1].t,
            tau,
            mad: spread,
            flagged: flagged.count(),
        });
        out.core.union_with(&flagged);
        out.mask.union_with(&grown);
        out.pair_flags.push(flagged);
    }
    Ok(out)
}

fn union_flags(bank: &ScoreBank, k: usize, shape: Shape, tau: f64) -> Vec<bool> {
    let (a, b) = (&bank.entries[k], &bank.entries[k + 1]);
    let (wa, wb) = (a.weight(), b.weight());
    let px = shape.pixels();
    (0..px)
        .map(|p| {
            (0..shape.c).any(|c| {
                let i = c * px + p;
                (wb * b.field.data()[i] - wa * a.field.data()[i]).abs() > tau
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
}

pub fn detection_metrics(mask: &SpatialMask, truth: &SpatialMask) -> Result<DetectionScores> {
    mask.check_spatial(Shape::new(1, truth.height(), truth.width()))?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&m, &t) in mask.bits().iter().zip(truth.bits()) {
        match (m, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(DetectionScores {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        iou: ratio(tp, tp + fp + fneg),
    })
}

/// Region-mean weighted dynamics per pair, `(t_b, value)`.
pub fn region_dynamics(bank: &ScoreBank, region: &SpatialMask, cfg: &DetectorConfig) -> Result<Vec<(u32, f64)>> {
    if region.is_empty() {
        return Err(Error::Usage("acceleration region is empty".into()));
    }
    let idx: Vec<usize> = region.indices().collect();
    let mut out = Vec::with_capacity(bank.len().saturating_sub(1));
    for k in 0..bank.len().saturating_sub(1) {
        let grid = weighted_dynamics(bank, k, cfg)?;
        let vals: Vec<f64> = idx.iter().map(|&p| grid[p]).collect();
        out.push((bank.entries[k + 1].t, mean(&vals)));
    }
    Ok(out)
}

/// Change in region-mean dynamics between consecutive pairs, reported at the
/// step the two pairs share.
pub fn acceleration_curve(bank: &ScoreBank, region: &SpatialMask, cfg: &DetectorConfig) -> Result<Vec<(u32, f64)>> {
    if bank.len() < 3 {
        return Err(Error::Usage(format!(
            "acceleration needs at least 3 banked scores, have {}",
            bank.len()
        )));
    }
    let dynamics = region_dynamics(bank, region, cfg)?;
    Ok(dynamics
        .windows(2)
        .map(|w| (w[0].0, w[1].1 - w[0].1))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Rect;

    fn flat(v: f64) -> Image {
        Image::filled(Shape::new(1, 4, 4), v)
    }

    fn cfg() -> DetectorConfig {
        DetectorConfig::with_window(800, 480)
    }

    #[test]
    fn zero_bank_gives_empty_mask() {
        let mut bank = ScoreBank::new();
        bank.push(800, 0.5, flat(0.0)).unwrap();
        bank.push(760, 0.6, flat(0.0)).unwrap();
        let m = detect(&bank, &cfg()).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.pairs[0].tau, 0.0);
    }

    #[test]
    fn identical_weighted_fields_give_zero_dynamics() {
        let mut bank = ScoreBank::new();
        bank.push(800, 0.5, flat(2.0)).unwrap();
        bank.push(760, 0.5, flat(2.0)).unwrap();
        assert!(weighted_dynamics(&bank, 0, &cfg()).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn single_spike_is_linear() {
        let mut spiked = flat(0.0);
        spiked.set(0, 1, 2, 3.0);
        let mut bank = ScoreBank::new();
        bank.push(800, 0.5, flat(0.0)).unwrap();
        bank.push(760, 0.6, spiked).unwrap();
        let g = weighted_dynamics(&bank, 0, &cfg()).unwrap();
        let w = weight_from_alpha_bar(0.6);
        for (p, &d) in g.iter().enumerate() {
            assert_eq!(d, if p == 6 { w * 3.0 } else { 0.0 });
        }
    }

    #[test]
    fn short_bank_is_usage_error() {
        let mut bank = ScoreBank::new();
        bank.push(800, 0.5, flat(0.0)).unwrap();
        assert!(matches!(detect(&bank, &cfg()), Err(Error::Usage(_))));
        assert!(weighted_dynamics(&bank, 0, &cfg()).unwrap_err().is_usage());
        assert!(bank.push(800, 0.5, flat(0.0)).is_err());
    }

    #[test]
    fn threshold_textbook() {
        let mut bank = ScoreBank::new();
        bank.push(2, 1.0, Image::zeros(Shape::new(1, 1, 5))).unwrap();
        assert_eq!(adaptive_threshold(&[1.0, 2.0, 3.0, 4.0, 5.0], &bank, &cfg()), 1.0);
        assert_eq!(adaptive_threshold(&[7.0; 5], &bank, &cfg()), 0.0);
    }

    #[test]
    fn metrics_counting() {
        let truth = SpatialMask::from_rect(16, 16, &Rect::new(3, 3, 13, 13));
        let s = detection_metrics(&truth, &truth).unwrap();
        assert_eq!((s.precision, s.recall, s.iou), (1.0, 1.0, 1.0));
        let grown = truth.dilate(1);
        let s = detection_metrics(&grown, &truth).unwrap();
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.precision, 100.0 / 144.0);
        assert_eq!(s.iou, 100.0 / 144.0);
        let other = SpatialMask::from_rect(16, 16, &Rect::new(0, 0, 2, 2));
        let s = detection_metrics(&other, &truth).unwrap();
        assert_eq!((s.precision, s.recall, s.iou), (0.0, 0.0, 0.0));
        let e = SpatialMask::empty(16, 16);
        let s = detection_metrics(&e, &e).unwrap();
        assert_eq!((s.precision, s.recall, s.iou), (1.0, 1.0, 1.0));
        assert!(detection_metrics(&e, &SpatialMask::empty(8, 8)).unwrap_err().is_usage());
    }

    #[test]
    fn provenance_positive_exactly_on_mask() {
        let mut bank = ScoreBank::new();
        let mut a = flat(0.0);
        a.set(0, 0, 0, 9.0);
        let mut b = flat(0.0);
        b.set(0, 3, 3, 9.0);
        bank.push(800, 0.5, flat(0.0)).unwrap();
        bank.push(760, 0.5, a).unwrap();
        bank.push(720, 0.5, b).unwrap();
        let m = detect(&bank, &cfg()).unwrap();
        for (p, &bit) in m.mask.bits().iter().enumerate() {
            assert_eq!(bit, m.provenance[p] > 0);
        }
        assert_eq!(m.provenance[0], 2);
        assert_eq!(m.provenance[15], 1);
    }

    #[test]
    fn linear_region_mean_has_zero_acceleration() {
        let mut bank = ScoreBank::new();
        for (i, t) in [800u32, 760, 720, 680].into_iter().enumerate() {
            bank.push(t, 0.5, flat(i as f64)).unwrap();
        }
        let region = SpatialMask::from_rect(4, 4, &Rect::new(0, 0, 2, 2));
        let acc = acceleration_curve(&bank, &region, &cfg()).unwrap();
        assert_eq!(acc.len(), 2);
        assert!(acc.iter().all(|&(_, v)| v == 0.0));
        assert_eq!(acc[0].0, 760);
        assert!(acceleration_curve(&bank, &SpatialMask::empty(4, 4), &cfg()).is_err());
    }

    #[test]
    fn window_resolution() {
        let grid = StepGrid::uniform(1000, 25).unwrap();
        assert_eq!(resolve_window(grid.timesteps(), 1000, 0.8, 0.48).unwrap(), (800, 480));
        // 500 sits between 520 and 480; tie goes to the larger step.
        assert_eq!(resolve_window(grid.timesteps(), 1000, 0.8, 0.5).unwrap().1, 520);
        assert!(resolve_window(grid.timesteps(), 1000, 0.4, 0.48).is_err());
        assert!(resolve_window(grid.timesteps(), 1000, 0.8, 0.0).is_err());
    }
}
