//! Masked correction at T_c: trajectory-aware targeted correction (TTC) and the
//! state-replacement and score-clipping baselines, wired into the sampler as a hook.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::{detect, ArtifactMask, DetectorConfig, ScoreBank};
use crate::error::{Error, Result};
use crate::image::{Image, ScoreField, SpatialMask};
use crate::rng::{standard_normal_image, Purpose, SampleSeed};
use crate::sampler::{predict_x0, renoise, rollout, HookAction, ScoreSource, StepHook, StepView, Trajectory};
use crate::schedule::{NoiseSchedule, StepGrid};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMethod {
    None,
    #[default]
    Ttc,
    StateReplace,
    ScoreClip,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// r·γξ
    #[default]
    LiteralMultiplicative,
    /// r·(1 + γξ)
    OnePlusMultiplicative,
    /// r + γξ
    Additive,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipBound {
    /// τ of the last detector pair.
    #[default]
    Tau,
    Fixed(f64),
}

impl CorrectionMethod {
    pub const ALL: [CorrectionMethod; 4] = [Self::None, Self::Ttc, Self::StateReplace, Self::ScoreClip];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Ttc => "ttc",
            Self::StateReplace => "state_replace",
            Self::ScoreClip => "score_clip",
        }
    }
}

impl FromStr for CorrectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "none" => Ok(Self::None),
            "ttc" => Ok(Self::Ttc),
            "state_replace" => Ok(Self::StateReplace),
            "score_clip" => Ok(Self::ScoreClip),
            _ => Err(Error::Config(format!("unknown correction method '{s}'"))),
        }
    }
}

impl PerturbationMode {
    pub const ALL: [PerturbationMode; 3] = [
        Self::LiteralMultiplicative,
        Self::OnePlusMultiplicative,
        Self::Additive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::LiteralMultiplicative => "literal",
            Self::OnePlusMultiplicative => "one-plus",
            Self::Additive => "additive",
        }
    }

    fn apply(self, r: f64, gamma: f64, xi: f64) -> f64 {
        match self {
            Self::LiteralMultiplicative => r * (gamma * xi),
            Self::OnePlusMultiplicative => r * (1.0 + gamma * xi),
            Self::Additive => r + gamma * xi,
        }
    }
}

impl FromStr for PerturbationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "literal" | "literal-multiplicative" => Ok(Self::LiteralMultiplicative),
            "one-plus" | "one-plus-multiplicative" => Ok(Self::OnePlusMultiplicative),
            "additive" => Ok(Self::Additive),
            _ => Err(Error::Config(format!("unknown perturbation mode '{s}'"))),
        }
    }
}

impl FromStr for ClipBound {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "tau" {
            return Ok(Self::Tau);
        }
        let v = s
            .strip_prefix("fixed:")
            .unwrap_or(s)
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("clip bound must be 'tau' or a number, got '{s}'")))?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("fixed clip bound must be positive, got {v}")));
        }
        Ok(Self::Fixed(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionConfig {
    pub method: CorrectionMethod,
    pub gamma: f64,
    pub perturbation_mode: PerturbationMode,
    /// Source step for state replacement; `None` uses the detector's T_d.
    pub replace_source_step: Option<u32>,
    pub clip_bound: ClipBound,
    /// Overrides the run seed for the ξ stream only.
    pub xi_seed: Option<u64>,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            method: CorrectionMethod::Ttc,
            gamma: 0.1,
            perturbation_mode: PerturbationMode::default(),
            replace_source_step: None,
            clip_bound: ClipBound::Tau,
            xi_seed: None,
        }
    }
}

impl CorrectionConfig {
    pub fn none() -> Self {
        Self {
            method: CorrectionMethod::None,
            ..Self::default()
        }
    }

    pub fn ttc(mode: PerturbationMode) -> Self {
        Self {
            perturbation_mode: mode,
            ..Self::default()
        }
    }

    pub fn with_method(method: CorrectionMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self, det: &DetectorConfig) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.method == CorrectionMethod::StateReplace {
            let src = self.source_step(det);
            if src < det.t_correct {
                return Err(Error::Config(format!(
                    "replace_source_step {src} must not be later than T_c {}",
                    det.t_correct
                )));
            }
        }
        Ok(())
    }

    pub fn source_step(&self, det: &DetectorConfig) -> u32 {
        self.replace_source_step.unwrap_or(det.t_detect_start)
    }
}

/// Fresh ε for re-noising at `t`.
pub fn renoise_eps(x: &Image, seed: SampleSeed, t: u32) -> Image {
    standard_normal_image(&mut seed.stream(t, Purpose::RenoiseEps), x.shape())
}

/// ξ for the TTC perturbation at `t`.
pub fn perturb_xi(x: &Image, seed: SampleSeed, t: u32, xi_seed: Option<u64>) -> Image {
    let s = SampleSeed::new(xi_seed.unwrap_or(seed.run), seed.sample);
    standard_normal_image(&mut s.stream(t, Purpose::PerturbXi), x.shape())
}

/// Masked TTC update with explicit noise draws.
pub fn ttc_correct_with(
    x: &Image,
    mask: &SpatialMask,
    sched: &NoiseSchedule,
    score: &ScoreField,
    t: u32,
    gamma: f64,
    mode: PerturbationMode,
    eps: &Image,
    xi: &Image,
) -> Result<Image> {
    mask.check_spatial(x.shape())?;
    if mask.is_empty() {
        return Ok(x.clone());
    }
    let r = renoise(&predict_x0(x, score, sched, t)?, sched, t, eps)?;
    x.shape().check(&xi.shape())?;
    let shape = x.shape();
    let px = shape.pixels();
    let mut out = x.clone();
    let od = out.data_mut();
    for c in 0..shape.c {
        for p in mask.indices() {
            let i = c * px + p;
            od[i] = mode.apply(r.data()[i], gamma, xi.data()[i]);
        }
    }
    Ok(out)
}

/// TTC at step `t` with ε and ξ drawn from their seeded streams.
pub fn ttc_correct(
    x: &Image,
    mask: &SpatialMask,
    sched: &NoiseSchedule,
    score: &ScoreField,
    t: u32,
    cfg: &CorrectionConfig,
    seed: SampleSeed,
) -> Result<Image> {
    let eps = renoise_eps(x, seed, t);
    let xi = perturb_xi(x, seed, t, cfg.xi_seed);
    ttc_correct_with(x, mask, sched, score, t, cfg.gamma, cfg.perturbation_mode, &eps, &xi)
}

/// Splice the re-noised clean prediction from `source_step` into the mask at `t`.
pub fn state_replace(
    x: &Image,
    mask: &SpatialMask,
    history: &Trajectory,
    sched: &NoiseSchedule,
    source_step: u32,
    t: u32,
    seed: SampleSeed,
) -> Result<Image> {
    mask.check_spatial(x.shape())?;
    let (sx, ss) = history.frame(source_step).ok_or_else(|| {
        Error::Usage(format!("state_replace source step {source_step} not in trajectory"))
    })?;
    if mask.is_empty() {
        return Ok(x.clone());
    }
    let x0 = predict_x0(sx, ss, sched, source_step)?;
    let r = renoise(&x0, sched, t, &renoise_eps(x, seed, t))?;
    let mut out = x.clone();
    out.splice(&r, mask)?;
    Ok(out)
}

/// Limit the weighted change `|w(t)s − w(t_prev)s_prev|` of each element to `bound`,
/// optionally only inside `mask`.
pub fn score_clip(
    field: &ScoreField,
    prev_field: &ScoreField,
    sched: &NoiseSchedule,
    t: u32,
    t_prev: u32,
    bound: f64,
    mask: Option<&SpatialMask>,
) -> Result<ScoreField> {
    if !(bound > 0.0) {
        return Err(Error::Usage(format!("clip bound must be positive, got {bound}")));
    }
    field.shape().check(&prev_field.shape())?;
    let (w, wp) = (sched.temporal_weight(t)?, sched.temporal_weight(t_prev)?);
    let shape = field.shape();
    let px = shape.pixels();
    let mut out = field.clone();
    let od = out.data_mut();
    for (i, v) in od.iter_mut().enumerate() {
        if let Some(m) = mask {
            if !m.bits()[i % px] {
                continue;
            }
        }
        let base = wp * prev_field.data()[i];
        let d = w * *v - base;
        if d.abs() > bound {
            *v = (base + bound * d.signum()) / w;
        }
    }
    Ok(out)
}

/// What the corrector did at T_c.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionRecord {
    pub t: u32,
    pub state_before: Image,
    pub state_after: Image,
    pub score_before: ScoreField,
    pub score_after: Option<ScoreField>,
}

/// Banks scores over the window, detects at T_c and applies the configured correction.
pub struct CorrectionHook<'a> {
    det: &'a DetectorConfig,
    corr: &'a CorrectionConfig,
    mask: Option<ArtifactMask>,
    record: Option<CorrectionRecord>,
}

impl<'a> CorrectionHook<'a> {
    pub fn new(det: &'a DetectorConfig, corr: &'a CorrectionConfig) -> Self {
        Self {
            det,
            corr,
            mask: None,
            record: None,
        }
    }

    pub fn mask(&self) -> Option<&ArtifactMask> {
        self.mask.as_ref()
    }

    pub fn into_parts(self) -> (Option<ArtifactMask>, Option<CorrectionRecord>) {
        (self.mask, self.record)
    }
}

/// Online bank over the recorded frames, with scores rounded to trace (f32) precision.
pub fn online_bank(history: &Trajectory, sched: &NoiseSchedule, det: &DetectorConfig) -> Result<ScoreBank> {
    let rounded: Vec<ScoreField> = history.scores.iter().map(Image::round_f32).collect();
    ScoreBank::from_trajectory(&history.steps, &rounded, sched, det)
}

impl StepHook for CorrectionHook<'_> {
    fn fires_at(&self, t: u32) -> bool {
        t == self.det.t_correct
    }

    fn on_step(&mut self, view: &StepView<'_>) -> Result<HookAction> {
        let bank = online_bank(view.history, view.sched, self.det)?;
        let found = detect(&bank, self.det)?;
        let mask = found.mask.clone();
        let t = view.t;
        let action = match self.corr.method {
            CorrectionMethod::None => HookAction::Continue,
            CorrectionMethod::Ttc => HookAction::ReplaceState(ttc_correct(
                view.state,
                &mask,
                view.sched,
                view.score,
                t,
                self.corr,
                view.seed,
            )?),
            CorrectionMethod::StateReplace => HookAction::ReplaceState(state_replace(
                view.state,
                &mask,
                view.history,
                view.sched,
                self.corr.source_step(self.det),
                t,
                view.seed,
            )?),
            CorrectionMethod::ScoreClip => {
                let bound = match self.corr.clip_bound {
                    ClipBound::Tau => found.last_tau().unwrap_or(0.0),
                    ClipBound::Fixed(b) => b,
                };
                let n = view.history.len();
                if mask.is_empty() || n < 2 || bound <= 0.0 {
                    HookAction::Continue
                } else {
                    HookAction::ReplaceScore(score_clip(
                        view.score,
                        &view.history.scores[n - 2],
                        view.sched,
                        t,
                        view.history.steps[n - 2],
                        bound,
                        Some(&mask),
                    )?)
                }
            }
        };
        let (state_after, score_after) = match &action {
            HookAction::ReplaceState(x) => (x.clone(), None),
            HookAction::ReplaceScore(s) => (view.state.clone(), Some(s.clone())),
            HookAction::Continue => (view.state.clone(), None),
        };
        self.record = Some(CorrectionRecord {
            t,
            state_before: view.state.clone(),
            state_after,
            score_before: view.score.clone(),
            score_after,
        });
        self.mask = Some(found);
        Ok(action)
    }
}

#[derive(Debug, Clone)]
pub struct CorrectedRun {
    pub trajectory: Trajectory,
    pub mask: ArtifactMask,
    pub record: CorrectionRecord,
}

impl CorrectedRun {
    pub fn final_state(&self) -> &Image {
        &self.trajectory.final_state
    }
}

/// Full pipeline: rollout, detection at T_c, correction, refinement to t = 0.
pub fn run_corrected(
    oracle: &mut dyn ScoreSource,
    sched: &NoiseSchedule,
    grid: &StepGrid,
    seed: SampleSeed,
    det: &DetectorConfig,
    corr: &CorrectionConfig,
) -> Result<CorrectedRun> {
    det.validate()?;
    corr.validate(det)?;
    for (name, t) in [("T_d", det.t_detect_start), ("T_c", det.t_correct)] {
        if !grid.contains(t) {
            return Err(Error::Config(format!("{name}={t} is not a step of the sampling grid")));
        }
    }
    let mut hook = CorrectionHook::new(det, corr);
    let trajectory = rollout(oracle, sched, grid, seed, &mut [&mut hook])?;
    let (mask, record) = hook.into_parts();
    Ok(CorrectedRun {
        trajectory,
        mask: mask.expect("hook fires at a grid step"),
        record: record.expect("hook fires at a grid step"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GmmModel;
    use crate::image::{Rect, Shape};
    use crate::rng::standard_normal_image;
    use crate::sampler::initial_noise;

    fn setup() -> (NoiseSchedule, GmmModel, Image, ScoreField) {
        let sched = NoiseSchedule::default_linear();
        let model = GmmModel::desk_default();
        let x = initial_noise(model.shape(), &sched, SampleSeed::new(4, 0)).scale(0.7);
        let s = model.true_score(&sched, &x, 480).unwrap();
        (sched, model, x, s)
    }

    #[test]
    fn empty_mask_is_identity_in_every_mode() {
        let (sched, _, x, s) = setup();
        let m = SpatialMask::empty(16, 16);
        for mode in PerturbationMode::ALL {
            let out = ttc_correct(&x, &m, &sched, &s, 480, &CorrectionConfig::ttc(mode), SampleSeed::new(1, 0)).unwrap();
            assert_eq!(out, x);
        }
    }

    #[test]
    fn additive_gamma_zero_is_renoised_prediction() {
        let (sched, _, x, s) = setup();
        let m = SpatialMask::from_rect(16, 16, &Rect::new(2, 2, 9, 9));
        let mut cfg = CorrectionConfig::ttc(PerturbationMode::Additive);
        cfg.gamma = 0.0;
        let seed = SampleSeed::new(1, 0);
        let out = ttc_correct(&x, &m, &sched, &s, 480, &cfg, seed).unwrap();
        let r = renoise(&predict_x0(&x, &s, &sched, 480).unwrap(), &sched, 480, &renoise_eps(&x, seed, 480)).unwrap();
        let mut expect = x.clone();
        expect.splice(&r, &m).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn one_plus_mean_over_xi_recovers_r() {
        let (sched, _, x, s) = setup();
        let m = SpatialMask::from_rect(16, 16, &Rect::new(0, 0, 16, 16));
        let eps = renoise_eps(&x, SampleSeed::new(1, 0), 480);
        let r = renoise(&predict_x0(&x, &s, &sched, 480).unwrap(), &sched, 480, &eps).unwrap();
        let n = 10_000;
        let mut acc = vec![0.0; x.data().len()];
        let mut rng = SampleSeed::new(9, 9).stream(0, Purpose::PerturbXi);
        for _ in 0..n {
            let xi = standard_normal_image(&mut rng, x.shape());
            let out = ttc_correct_with(&x, &m, &sched, &s, 480, 0.3, PerturbationMode::OnePlusMultiplicative, &eps, &xi).unwrap();
            for (a, v) in acc.iter_mut().zip(out.data()) {
                *a += v / n as f64;
            }
        }
        let rn = r.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let err = acc.iter().zip(r.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err / rn < 0.01, "relative error {}", err / rn);
    }

    #[test]
    fn clip_halves_a_double_change() {
        let sched = NoiseSchedule::default_linear();
        let shape = Shape::new(1, 4, 4);
        let prev = Image::zeros(shape);
        let w = sched.temporal_weight(480).unwrap();
        let mut field = Image::filled(shape, 0.1 / w);
        field.set(0, 2, 2, 2.0 / w);
        let out = score_clip(&field, &prev, &sched, 480, 520, 1.0, None).unwrap();
        assert!((w * out.get(0, 2, 2) - 1.0).abs() < 1e-12);
        for p in 0..16 {
            if p != 10 {
                assert_eq!(out.data()[p], field.data()[p]);
            }
        }
        let same = score_clip(&prev, &prev, &sched, 480, 520, 1.0, None).unwrap();
        assert_eq!(same, prev);
    }

    #[test]
    fn state_replace_missing_source_is_usage_error() {
        let (sched, mut model, _, _) = setup();
        let grid = StepGrid::uniform(1000, 25).unwrap();
        let traj = rollout(&mut model, &sched, &grid, SampleSeed::new(0, 0), &mut []).unwrap();
        let m = SpatialMask::from_rect(16, 16, &Rect::new(2, 2, 9, 9));
        let err = state_replace(&traj.states[0], &m, &traj, &sched, 999, 480, SampleSeed::new(0, 0)).unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn parsing() {
        assert_eq!("one-plus".parse::<PerturbationMode>().unwrap(), PerturbationMode::OnePlusMultiplicative);
        assert_eq!("state-replace".parse::<CorrectionMethod>().unwrap(), CorrectionMethod::StateReplace);
        assert_eq!("2.5".parse::<ClipBound>().unwrap(), ClipBound::Fixed(2.5));
        assert!("-1".parse::<ClipBound>().is_err());
        assert!("bogus".parse::<CorrectionMethod>().is_err());
    }
}
