//! Discrete diffusion time grid and schedule-derived scalars.
//!
//! Timesteps are 1-based: `t = 1..=T` index the schedule tables and `t = 0`
//! denotes the clean sample, with ᾱ₀ defined as exactly 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Offset `s` of the cosine schedule.
    pub cosine_offset: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            beta_min: 1e-4,
            beta_max: 0.02,
            cosine_offset: 0.008,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_total: u32, params: ScheduleParams) -> Result<Self> {
        if t_total < 2 {
            return Err(Error::Config(format!("T_total must be >= 2, got {t_total}")));
        }
        let n = t_total as usize;
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let ScheduleParams {
                    beta_min, beta_max, ..
                } = params;
                if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
                    return Err(Error::Config(format!(
                        "linear schedule needs 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
                    )));
                }
                (0..n)
                    .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (n - 1) as f64)
                    .collect()
            }
            ScheduleKind::Cosine => {
                let s = params.cosine_offset;
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::Config(format!("cosine offset must be positive, got {s}")));
                }
                let f = |t: f64| {
                    let x = (t / n as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                let f0 = f(0.0);
                (1..=n)
                    .map(|t| {
                        let prev = f((t - 1) as f64) / f0;
                        let cur = f(t as f64) / f0;
                        (1.0 - cur / prev).clamp(1e-8, 0.999)
                    })
                    .collect()
            }
        };
        Self::from_betas(kind, beta)
    }

    /// The default desk-scale schedule: linear β ∈ [1e-4, 0.02], T = 1000.
    pub fn default_linear() -> Self {
        Self::new(ScheduleKind::Linear, 1000, ScheduleParams::default())
            .expect("default parameters are valid")
    }

    pub fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::Config("schedule needs at least 2 steps".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            kind,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_total(&self) -> u32 {
        self.beta.len() as u32
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: u32) -> Result<usize> {
        if t == 0 || t > self.t_total() {
            Err(Error::Index {
                t,
                max: self.t_total(),
            })
        } else {
            Ok(t as usize - 1)
        }
    }

    /// ᾱ_t for `t` in `0..=T`; ᾱ₀ = 1.
    pub fn alpha_bar(&self, t: u32) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bar[self.check(t)?])
    }

    pub fn beta(&self, t: u32) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    /// w(t) = (1 − ᾱ_t)/√ᾱ_t.
    pub fn temporal_weight(&self, t: u32) -> Result<f64> {
        Ok(weight_from_alpha_bar(self.alpha_bar[self.check(t)?]))
    }

    /// SNR(t) = ᾱ_t/(1 − ᾱ_t).
    pub fn snr(&self, t: u32) -> Result<f64> {
        let ab = self.alpha_bar[self.check(t)?];
        if ab >= 1.0 {
            return Err(Error::Numeric(format!("SNR undefined at t={t}: alpha_bar = 1")));
        }
        Ok(ab / (1.0 - ab))
    }
}

pub fn weight_from_alpha_bar(alpha_bar: f64) -> f64 {
    (1.0 - alpha_bar) / alpha_bar.sqrt()
}

/// Strictly decreasing subsequence of `1..=T` visited by the sampler.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepGrid {
    timesteps: Vec<u32>,
}

impl StepGrid {
    /// Uniform stride over `1..=T`, rounding toward larger t, starting at T.
    pub fn uniform(t_total: u32, nfe: u32) -> Result<Self> {
        if nfe == 0 || nfe > t_total {
            return Err(Error::Config(format!(
                "NFE must be in 1..={t_total}, got {nfe}"
            )));
        }
        let (t, n) = (u64::from(t_total), u64::from(nfe));
        let timesteps = (0..n).map(|i| (t * (n - i)).div_ceil(n) as u32).collect();
        Self::from_steps(timesteps)
    }

    pub fn from_steps(timesteps: Vec<u32>) -> Result<Self> {
        if timesteps.is_empty() {
            return Err(Error::Config("step grid is empty".into()));
        }
        if timesteps.windows(2).any(|w| w[0] <= w[1]) || timesteps.last() == Some(&0) {
            return Err(Error::Config(
                "step grid must be strictly decreasing positive timesteps".into(),
            ));
        }
        Ok(Self { timesteps })
    }

    pub fn nfe(&self) -> usize {
        self.timesteps.len()
    }

    pub fn timesteps(&self) -> &[u32] {
        &self.timesteps
    }

    pub fn first(&self) -> u32 {
        self.timesteps[0]
    }

    pub fn contains(&self, t: u32) -> bool {
        self.timesteps.binary_search_by(|p| t.cmp(p)).is_ok()
    }

    /// The step the sampler moves to after `t`; 0 after the last grid entry.
    pub fn successor(&self, t: u32) -> Option<u32> {
        let i = self.timesteps.iter().position(|&s| s == t)?;
        Some(self.timesteps.get(i + 1).copied().unwrap_or(0))
    }

    /// Grid step closest to `target`, ties resolved toward the larger step.
    pub fn nearest(&self, target: f64) -> u32 {
        nearest_step(&self.timesteps, target)
    }
}

pub(crate) fn nearest_step(steps: &[u32], target: f64) -> u32 {
    let mut best = steps[0];
    let mut best_d = f64::INFINITY;
    for &s in steps {
        let d = (f64::from(s) - target).abs();
        if d < best_d || (d == best_d && s > best) {
            best = s;
            best_d = d;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.5, 0.5]).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5, 0.25]);
        assert_eq!(s.alphas(), &[0.5, 0.5]);
    }

    #[test]
    fn default_linear_terminal_alpha_bar() {
        // Reference product computed independently with numpy:
        // np.cumprod(1 - np.linspace(1e-4, 0.02, 1000))[-1]
        let s = NoiseSchedule::default_linear();
        let ab = s.alpha_bar(1000).unwrap();
        assert!(ab < 1e-4);
        assert_relative_eq!(ab, 4.035_829_765_375_676e-5, max_relative = 1e-10);
        assert!(s.alpha_bar(1).unwrap() > 0.99);
    }

    #[test]
    fn rejects_bad_parameters() {
        let bad = ScheduleParams {
            beta_min: 0.02,
            beta_max: 0.02,
            ..Default::default()
        };
        assert!(matches!(
            NoiseSchedule::new(ScheduleKind::Linear, 1000, bad),
            Err(Error::Config(_))
        ));
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 1, ScheduleParams::default()).is_err());
    }

    #[test]
    fn weight_and_snr_examples() {
        assert_eq!(weight_from_alpha_bar(1.0), 0.0);
        assert_relative_eq!(weight_from_alpha_bar(0.25), 1.5);
        assert_relative_eq!(weight_from_alpha_bar(0.5), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        let s = NoiseSchedule::from_betas(ScheduleKind::Linear, vec![0.2, 0.375]).unwrap();
        assert_relative_eq!(s.snr(1).unwrap(), 4.0, epsilon = 1e-12);
        assert_relative_eq!(s.snr(2).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn out_of_range_timestep() {
        let s = NoiseSchedule::default_linear();
        assert!(matches!(s.temporal_weight(0), Err(Error::Index { .. })));
        assert!(matches!(s.snr(1001), Err(Error::Index { .. })));
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn invariants_hold_for_both_kinds() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::new(kind, 1000, ScheduleParams::default()).unwrap();
            for t in 1..=1000 {
                let ab = s.alpha_bar(t).unwrap();
                assert!(ab > 0.0 && ab < 1.0);
                let w = s.temporal_weight(t).unwrap();
                assert!((w * w * s.snr(t).unwrap() - (1.0 - ab)).abs() < 1e-12);
                if t < 1000 {
                    assert!(s.alpha_bar(t + 1).unwrap() < ab);
                    assert!(s.snr(t + 1).unwrap() < s.snr(t).unwrap());
                    assert!(s.temporal_weight(t + 1).unwrap() > w);
                }
            }
        }
    }

    #[test]
    fn construction_is_pure() {
        let a = NoiseSchedule::default_linear();
        let b = NoiseSchedule::default_linear();
        assert!(a
            .alpha_bars()
            .iter()
            .zip(b.alpha_bars())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn uniform_grid() {
        let g = StepGrid::uniform(1000, 25).unwrap();
        assert_eq!(g.nfe(), 25);
        assert_eq!(g.first(), 1000);
        assert_eq!(*g.timesteps().last().unwrap(), 40);
        assert_eq!(g.successor(40), Some(0));
        assert_eq!(g.successor(1000), Some(960));
        assert!(g.contains(760) && !g.contains(761));
        let g = StepGrid::uniform(10, 3).unwrap();
        assert_eq!(g.timesteps(), &[10, 7, 4]);
        assert_eq!(StepGrid::uniform(1000, 1000).unwrap().timesteps().last(), Some(&1));
        assert!(StepGrid::uniform(10, 11).is_err());
    }

    #[test]
    fn nearest_prefers_larger_on_tie() {
        let g = StepGrid::uniform(1000, 25).unwrap();
        assert_eq!(g.nearest(480.0), 480);
        assert_eq!(g.nearest(500.0), 520);
        assert_eq!(g.nearest(490.0), 480);
    }
}
