//! Ground-truth score traps injected on top of the analytic oracle.
//!
//! A trap leaves the score untouched outside its rectangle and before its
//! trigger step. From the trigger on, the in-region score first carries a
//! triangular acceleration pulse and then locks onto a snapshot of the last
//! emitted in-region score. The lock holds only while the region keeps following
//! the trajectory the locked score produces: if the in-region state is moved by
//! anything other than the sampler's own step (a correction), the trap releases
//! and the region sees the true score again.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{weighted_delta_grid, ChannelReduce};
use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::image::{Image, Rect, ScoreField, Shape, SpatialMask};
use crate::rng::{stream, Purpose};
use crate::sampler::{ddim_update, ScoreSource};
use crate::schedule::{weight_from_alpha_bar, NoiseSchedule, StepGrid};
use crate::stats::mad;

/// Relative tolerance for deciding that the in-region state left the locked path.
const RELEASE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrapMode {
    SpikeThenFreeze,
    FreezeOnly,
}

/// Units in which the locked snapshot is held.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeKind {
    /// Hold the predicted noise ε fixed; the score tracks −ε/√(1 − ᾱ_t). Under DDIM the
    /// region then follows x_t = √ᾱ_t x̂₀* + √(1 − ᾱ_t) ε* and ends at x̂₀* for any grid.
    #[default]
    Noise,
    /// Hold the raw score fixed (Δs = 0 in the region).
    Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapSpec {
    pub region: Rect,
    /// First step (counting down) at which the anomaly is active: every t ≤ trigger_step.
    pub trigger_step: u32,
    pub spike_steps: u32,
    pub spike_gain: f64,
    pub mode: TrapMode,
    pub freeze: FreezeKind,
    pub pattern_seed: u64,
}

impl TrapSpec {
    pub fn validate(&self, shape: Shape, grid: &StepGrid) -> Result<()> {
        if !self.region.fits(shape.h, shape.w) {
            return Err(Error::Config(format!(
                "trap region {:?} empty or outside {}x{} image",
                self.region, shape.h, shape.w
            )));
        }
        if !(self.spike_gain > 0.0 && self.spike_gain.is_finite()) {
            return Err(Error::Config("trap spike_gain must be positive".into()));
        }
        if self.mode == TrapMode::SpikeThenFreeze && self.spike_steps == 0 {
            return Err(Error::Config("spike_then_freeze needs spike_steps >= 1".into()));
        }
        let last = *grid.timesteps().last().expect("grid is non-empty");
        if self.trigger_step < last || self.trigger_step >= grid.first() {
            return Err(Error::Config(format!(
                "trap trigger {} outside sampling grid [{last}, {})",
                self.trigger_step,
                grid.first()
            )));
        }
        Ok(())
    }

    pub fn truth_mask(&self, h: usize, w: usize) -> SpatialMask {
        SpatialMask::from_rect(h, w, &self.region)
    }

    /// Triangular pulse value for the `j`-th spike step (zeros just outside the window).
    pub fn pulse(&self, j: u32) -> f64 {
        let n = f64::from(self.spike_steps);
        1.0 - (2.0 * f64::from(j + 1) / (n + 1.0) - 1.0).abs()
    }

    /// Flat element indices (all channels) covered by the region.
    fn element_indices(&self, shape: Shape) -> Vec<usize> {
        let mut idx = Vec::with_capacity(shape.c * self.region.area());
        for c in 0..shape.c {
            for r in self.region.row0..self.region.row1 {
                for col in self.region.col0..self.region.col1 {
                    idx.push(shape.index(c, r, col));
                }
            }
        }
        idx
    }

    /// Seeded ±1 pattern over the region's elements.
    fn pattern(&self, n: usize) -> Vec<f64> {
        let mut rng = stream(self.pattern_seed, 0, 0, Purpose::TrapPattern);
        (0..n)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Emission {
    t: u32,
    x: Vec<f64>,
    s: Vec<f64>,
}

/// Per-trajectory mutable trap bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct TrapState {
    prev_weighted: Option<(u32, Image)>,
    ambient: Option<f64>,
    emitted: u32,
    snapshot: Option<Vec<f64>>,
    last: Option<Emission>,
    released: bool,
    indices: Vec<usize>,
    pattern: Vec<f64>,
}

impl TrapState {
    pub fn new(trap: &TrapSpec, shape: Shape) -> Self {
        let indices = trap.element_indices(shape);
        let pattern = trap.pattern(indices.len());
        Self {
            indices,
            pattern,
            ..Default::default()
        }
    }

    pub fn reset(&mut self) {
        *self = Self {
            indices: std::mem::take(&mut self.indices),
            pattern: std::mem::take(&mut self.pattern),
            ..Default::default()
        };
    }

    pub fn released(&self) -> bool {
        self.released
    }

    /// Ambient weighted-dynamics scale captured at the step before the trigger.
    pub fn ambient(&self) -> Option<f64> {
        self.ambient
    }

    pub fn is_locked(&self) -> bool {
        self.snapshot.is_some() && !self.released
    }
}

/// Score with the trap applied, updating `state` in place.
pub fn trapped_score(
    model: &GmmModel,
    trap: &TrapSpec,
    sched: &NoiseSchedule,
    x: &Image,
    t: u32,
    state: &mut TrapState,
) -> Result<ScoreField> {
    let truth = model.true_score(sched, x, t)?;
    apply_trap(trap, sched, x, t, truth, state)
}

fn apply_trap(
    trap: &TrapSpec,
    sched: &NoiseSchedule,
    x: &Image,
    t: u32,
    truth: ScoreField,
    state: &mut TrapState,
) -> Result<ScoreField> {
    if state.indices.is_empty() {
        *state = TrapState::new(trap, x.shape());
    }
    let ab = sched.alpha_bar(t)?;

    if t > trap.trigger_step {
        let weighted = truth.scale(weight_from_alpha_bar(ab));
        match &state.prev_weighted {
            Some((pt, prev)) if *pt != t => {
                let grid = weighted_delta_grid(prev, &weighted, ChannelReduce::L2)?;
                state.ambient = Some(mad(&grid));
            }
            _ => {}
        }
        state.prev_weighted = Some((t, weighted));
        return Ok(truth);
    }
    if state.released {
        return Ok(truth);
    }

    let xd = x.data();
    if let Some(last) = &state.last {
        let ab_last = sched.alpha_bar(last.t)?;
        let moved = state.indices.iter().enumerate().any(|(k, &i)| {
            let expect = if t == last.t {
                last.x[k]
            } else {
                ddim_update(last.x[k], last.s[k], ab_last, ab)
            };
            (xd[i] - expect).abs() > RELEASE_TOL * (1.0 + expect.abs())
        });
        if moved {
            state.released = true;
            return Ok(truth);
        }
        if t == last.t {
            let mut out = truth;
            let od = out.data_mut();
            for (k, &i) in state.indices.iter().enumerate() {
                od[i] = last.s[k];
            }
            return Ok(out);
        }
    }

    let ambient = match state.ambient {
        Some(a) => a,
        None => {
            let w = weight_from_alpha_bar(ab);
            let grid: Vec<f64> = truth.data().iter().map(|v| (w * v).abs()).collect();
            let a = mad(&grid);
            state.ambient = Some(a);
            a
        }
    };
    let noise_scale = (1.0 - ab).sqrt();
    let to_frozen = |s: f64| match trap.freeze {
        FreezeKind::Score => s,
        FreezeKind::Noise => -s * noise_scale,
    };
    let from_frozen = |v: f64| match trap.freeze {
        FreezeKind::Score => v,
        FreezeKind::Noise => -v / noise_scale,
    };

    let j = state.emitted;
    let mut out = truth;
    let od = out.data_mut();
    let emitted: Vec<f64> = match (&state.snapshot, trap.mode) {
        (Some(snap), _) => snap.iter().map(|&v| from_frozen(v)).collect(),
        (None, TrapMode::FreezeOnly) => {
            let s: Vec<f64> = state.indices.iter().map(|&i| od[i]).collect();
            state.snapshot = Some(s.iter().map(|&v| to_frozen(v)).collect());
            s
        }
        (None, TrapMode::SpikeThenFreeze) => {
            let amp = trap.spike_gain * ambient * trap.pulse(j);
            let s: Vec<f64> = state
                .indices
                .iter()
                .zip(&state.pattern)
                .map(|(&i, u)| od[i] + amp * u)
                .collect();
            if j + 1 >= trap.spike_steps {
                state.snapshot = Some(s.iter().map(|&v| to_frozen(v)).collect());
            }
            s
        }
    };
    for (k, &i) in state.indices.iter().enumerate() {
        od[i] = emitted[k];
    }
    if !out.is_finite() {
        return Err(Error::Numeric(format!("trapped score non-finite at t={t}")));
    }
    state.emitted += 1;
    state.last = Some(Emission {
        t,
        x: state.indices.iter().map(|&i| xd[i]).collect(),
        s: emitted,
    });
    Ok(out)
}

/// The analytic mixture score with any number of traps layered on top.
#[derive(Debug, Clone)]
pub struct TrappedOracle {
    model: GmmModel,
    traps: Vec<TrapSpec>,
    states: Vec<TrapState>,
}

impl TrappedOracle {
    pub fn new(model: GmmModel, traps: Vec<TrapSpec>) -> Self {
        let shape = model.shape();
        let states = traps.iter().map(|t| TrapState::new(t, shape)).collect();
        Self {
            model,
            traps,
            states,
        }
    }

    pub fn model(&self) -> &GmmModel {
        &self.model
    }

    pub fn traps(&self) -> &[TrapSpec] {
        &self.traps
    }

    pub fn states(&self) -> &[TrapState] {
        &self.states
    }

    /// Union of all trap regions.
    pub fn truth_mask(&self) -> SpatialMask {
        let s = self.model.shape();
        let mut m = SpatialMask::empty(s.h, s.w);
        for t in &self.traps {
            m.union_with(&t.truth_mask(s.h, s.w));
        }
        m
    }
}

impl ScoreSource for TrappedOracle {
    fn shape(&self) -> Shape {
        self.model.shape()
    }

    fn reset(&mut self) {
        self.states.iter_mut().for_each(TrapState::reset);
    }

    fn score(&mut self, sched: &NoiseSchedule, x: &Image, t: u32) -> Result<ScoreField> {
        let mut s = self.model.true_score(sched, x, t)?;
        for (trap, state) in self.traps.iter().zip(self.states.iter_mut()) {
            s = apply_trap(trap, sched, x, t, s, state)?;
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SampleSeed;
    use crate::sampler::{eps_from_score, rollout};

    fn spec(mode: TrapMode) -> TrapSpec {
        TrapSpec {
            region: Rect::new(3, 3, 11, 11),
            trigger_step: 760,
            spike_steps: 3,
            spike_gain: 8.0,
            mode,
            freeze: FreezeKind::Noise,
            pattern_seed: 17,
        }
    }

    fn setup() -> (NoiseSchedule, StepGrid, GmmModel) {
        (
            NoiseSchedule::default_linear(),
            StepGrid::uniform(1000, 25).unwrap(),
            GmmModel::desk_default(),
        )
    }

    #[test]
    fn pulse_is_triangular() {
        let s = spec(TrapMode::SpikeThenFreeze);
        assert_eq!(s.pulse(0), 0.5);
        assert_eq!(s.pulse(1), 1.0);
        assert_eq!(s.pulse(2), 0.5);
    }

    #[test]
    fn identical_before_trigger_and_outside_region() {
        let (sched, grid, model) = setup();
        let mut oracle = TrappedOracle::new(model.clone(), vec![spec(TrapMode::SpikeThenFreeze)]);
        let traj = rollout(&mut oracle, &sched, &grid, SampleSeed::new(2, 0), &mut []).unwrap();
        let truth = oracle.truth_mask();
        for (i, &t) in traj.steps.iter().enumerate() {
            let clean = model.true_score(&sched, &traj.states[i], t).unwrap();
            let got = &traj.scores[i];
            if t > 760 {
                assert_eq!(got, &clean);
            } else {
                for c in 0..1 {
                    for r in 0..16 {
                        for col in 0..16 {
                            if !truth.get(r, col) {
                                assert_eq!(got.get(c, r, col).to_bits(), clean.get(c, r, col).to_bits());
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn freeze_only_holds_score_snapshot() {
        let (sched, grid, model) = setup();
        let mut trap = spec(TrapMode::FreezeOnly);
        trap.freeze = FreezeKind::Score;
        let mut oracle = TrappedOracle::new(model, vec![trap.clone()]);
        let traj = rollout(&mut oracle, &sched, &grid, SampleSeed::new(8, 0), &mut []).unwrap();
        let mask = trap.truth_mask(16, 16);
        let post: Vec<usize> = (0..traj.len()).filter(|&i| traj.steps[i] <= 760).collect();
        for w in post.windows(2) {
            for p in mask.indices() {
                assert_eq!(traj.scores[w[0]].data()[p], traj.scores[w[1]].data()[p]);
            }
        }
    }

    #[test]
    fn noise_freeze_holds_predicted_noise() {
        let (sched, grid, model) = setup();
        let trap = spec(TrapMode::FreezeOnly);
        let mut oracle = TrappedOracle::new(model, vec![trap.clone()]);
        let traj = rollout(&mut oracle, &sched, &grid, SampleSeed::new(8, 0), &mut []).unwrap();
        let mask = trap.truth_mask(16, 16);
        let eps: Vec<Image> = traj
            .steps
            .iter()
            .zip(&traj.scores)
            .filter(|(t, _)| **t <= 760)
            .map(|(t, s)| eps_from_score(s, &sched, *t).unwrap())
            .collect();
        for w in eps.windows(2) {
            for p in mask.indices() {
                assert!((w[0].data()[p] - w[1].data()[p]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spike_exceeds_ambient_mad() {
        let (sched, grid, model) = setup();
        let trap = spec(TrapMode::SpikeThenFreeze);
        let mut oracle = TrappedOracle::new(model, vec![trap.clone()]);
        let traj = rollout(&mut oracle, &sched, &grid, SampleSeed::new(3, 0), &mut []).unwrap();
        let mask = trap.truth_mask(16, 16);
        // Pair ending at the pulse peak (720): 760 -> 720.
        let i = traj.steps.iter().position(|&t| t == 720).unwrap();
        let wa = sched.temporal_weight(traj.steps[i - 1]).unwrap();
        let wb = sched.temporal_weight(720).unwrap();
        let grid = weighted_delta_grid(
            &traj.scores[i - 1].scale(wa),
            &traj.scores[i].scale(wb),
            ChannelReduce::L2,
        )
        .unwrap();
        let spatial = mad(&grid);
        let in_region: Vec<f64> = mask.indices().map(|p| grid[p]).collect();
        let min_in = in_region.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min_in >= 5.0 * spatial, "min {min_in} vs mad {spatial}");
    }

    #[test]
    fn perturbing_the_region_releases_the_lock() {
        let (sched, _, model) = setup();
        let trap = spec(TrapMode::FreezeOnly);
        let mut state = TrapState::new(&trap, model.shape());
        let x = crate::sampler::initial_noise(model.shape(), &sched, SampleSeed::new(1, 1));
        trapped_score(&model, &trap, &sched, &x, 800, &mut state).unwrap();
        let s1 = trapped_score(&model, &trap, &sched, &x, 760, &mut state).unwrap();
        assert!(state.is_locked());
        // Repeating the same call is idempotent.
        let again = trapped_score(&model, &trap, &sched, &x, 760, &mut state).unwrap();
        assert_eq!(s1, again);
        assert!(state.is_locked());
        let moved = x.map(|v| v + 0.1);
        let s2 = trapped_score(&model, &trap, &sched, &moved, 760, &mut state).unwrap();
        assert!(state.released());
        assert_eq!(s2, model.true_score(&sched, &moved, 760).unwrap());
    }

    #[test]
    fn validation() {
        let grid = StepGrid::uniform(1000, 25).unwrap();
        let shape = Shape::new(1, 16, 16);
        let mut t = spec(TrapMode::SpikeThenFreeze);
        assert!(t.validate(shape, &grid).is_ok());
        t.region = Rect::new(10, 10, 17, 12);
        assert!(t.validate(shape, &grid).is_err());
        let mut t = spec(TrapMode::SpikeThenFreeze);
        t.trigger_step = 1000;
        assert!(t.validate(shape, &grid).is_err());
        t.trigger_step = 760;
        t.spike_gain = 0.0;
        assert!(t.validate(shape, &grid).is_err());
    }
}
