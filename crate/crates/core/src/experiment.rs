//! Seeded trap scenarios and the per-trial measurements built on them.

use serde::{Deserialize, Serialize};

use crate::corrector::{run_corrected, CorrectedRun, CorrectionConfig};
use crate::detector::{detection_metrics, resolve_window, DetectionScores, DetectorConfig};
use crate::error::Result;
use crate::gmm::GmmModel;
use crate::image::{Image, Rect, SpatialMask};
use crate::rng::SampleSeed;
use crate::sampler::rollout;
use crate::schedule::{NoiseSchedule, StepGrid};
use crate::trap::{FreezeKind, TrapMode, TrapSpec, TrappedOracle};

/// Escape tolerance in units of the component's σ0.
pub const ESCAPE_SIGMAS: f64 = 3.0;

/// The reference trap: an 8×8 block triggered at t = 760 with a 3-step pulse.
pub fn reference_trap(pattern_seed: u64) -> TrapSpec {
    TrapSpec {
        region: Rect::new(3, 3, 11, 11),
        trigger_step: 760,
        spike_steps: 3,
        spike_gain: 8.0,
        mode: TrapMode::SpikeThenFreeze,
        freeze: FreezeKind::Noise,
        pattern_seed,
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub sched: NoiseSchedule,
    pub grid: StepGrid,
    pub model: GmmModel,
    pub traps: Vec<TrapSpec>,
}

impl Scenario {
    /// Default schedule, 25-step grid, default mixture, no traps.
    pub fn clean() -> Self {
        Self {
            sched: NoiseSchedule::default_linear(),
            grid: StepGrid::uniform(1000, 25).expect("valid grid"),
            model: GmmModel::desk_default(),
            traps: Vec::new(),
        }
    }

    pub fn reference() -> Self {
        Self {
            traps: vec![reference_trap(7)],
            ..Self::clean()
        }
    }

    pub fn with_grid(mut self, grid: StepGrid) -> Self {
        self.grid = grid;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.traps {
            t.validate(self.model.shape(), &self.grid)?;
        }
        Ok(())
    }

    pub fn oracle(&self) -> TrappedOracle {
        TrappedOracle::new(self.model.clone(), self.traps.clone())
    }

    pub fn truth_mask(&self) -> SpatialMask {
        self.oracle().truth_mask()
    }

    pub fn default_detector(&self) -> Result<DetectorConfig> {
        DetectorConfig::default_for(&self.grid, self.sched.t_total())
    }

    /// Detector at fraction `tc_frac`; T_d stays at `td_frac` unless that is not
    /// later than T_c, in which case it moves to `min(1, tc_frac + 0.1)`.
    pub fn detector_at(&self, td_frac: f64, tc_frac: f64) -> Result<DetectorConfig> {
        let td = if td_frac > tc_frac { td_frac } else { (tc_frac + 0.1).min(1.0) };
        let (t_d, t_c) = resolve_window(self.grid.timesteps(), self.sched.t_total(), td, tc_frac)?;
        Ok(DetectorConfig::with_window(t_d, t_c))
    }

    pub fn run(&self, seed: SampleSeed, det: &DetectorConfig, corr: &CorrectionConfig) -> Result<CorrectedRun> {
        let mut oracle = self.oracle();
        run_corrected(&mut oracle, &self.sched, &self.grid, seed, det, corr)
    }

    /// Final image of a plain rollout under the scenario's oracle.
    pub fn sample(&self, seed: SampleSeed) -> Result<Image> {
        let mut oracle = self.oracle();
        Ok(rollout(&mut oracle, &self.sched, &self.grid, seed, &mut [])?.final_state)
    }

    /// Whether every trap region of `x` landed on the component chosen by the rest of the image.
    pub fn escaped(&self, x: &Image) -> bool {
        escaped(&self.model, x, &self.truth_mask())
    }

    pub fn trial(&self, seed: SampleSeed, det: &DetectorConfig, corr: &CorrectionConfig) -> Result<Trial> {
        let run = self.run(seed, det, corr)?;
        let detection = detection_metrics(&run.mask.mask, &self.truth_mask())?;
        let nll = self.model.nll(run.final_state())?;
        Ok(Trial {
            escaped: self.escaped(run.final_state()),
            nll,
            detection,
            run,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub run: CorrectedRun,
    pub escaped: bool,
    pub nll: f64,
    pub detection: DetectionScores,
}

/// Mixture component that best explains the pixels outside `region`.
pub fn dominant_outside(model: &GmmModel, x: &Image, region: &SpatialMask) -> usize {
    let px = x.shape().pixels();
    let keep: Vec<usize> = (0..x.data().len()).filter(|i| !region.bits()[i % px]).collect();
    let score = |k: usize| {
        let mu = model.templates()[k].data();
        let var = model.sigma0()[k].powi(2).max(f64::MIN_POSITIVE);
        let d2: f64 = keep.iter().map(|&i| (x.data()[i] - mu[i]).powi(2)).sum();
        model.weights()[k].ln() - 0.5 * keep.len() as f64 * var.ln() - 0.5 * d2 / var
    };
    (0..model.n_components())
        .max_by(|&a, &b| score(a).total_cmp(&score(b)))
        .expect("model has components")
}

/// In-region RMS distance of `x` from the template chosen outside the region.
pub fn region_residual(model: &GmmModel, x: &Image, region: &SpatialMask) -> (usize, f64) {
    let k = dominant_outside(model, x, region);
    let px = x.shape().pixels();
    let mu = model.templates()[k].data();
    let inside: Vec<f64> = (0..x.data().len())
        .filter(|i| region.bits()[i % px])
        .map(|i| (x.data()[i] - mu[i]).powi(2))
        .collect();
    let rms = (inside.iter().sum::<f64>() / inside.len().max(1) as f64).sqrt();
    (k, rms)
}

pub fn escaped(model: &GmmModel, x: &Image, region: &SpatialMask) -> bool {
    if region.is_empty() {
        return true;
    }
    let (k, rms) = region_residual(model, x, region);
    rms <= ESCAPE_SIGMAS * model.sigma0()[k]
}

/// RMS of `a − b` over the pixels selected (or not) by `region`.
pub fn masked_rms_diff(a: &Image, b: &Image, region: &SpatialMask, inside: bool) -> f64 {
    let px = a.shape().pixels();
    let d: Vec<f64> = (0..a.data().len())
        .filter(|i| region.bits()[i % px] == inside)
        .map(|i| (a.data()[i] - b.data()[i]).powi(2))
        .collect();
    (d.iter().sum::<f64>() / d.len().max(1) as f64).sqrt()
}

/// One row of the correction-timing sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tc_frac: f64,
    pub t_c: u32,
    pub t_d: u32,
    pub escape_rate: f64,
    pub sliced_w2: f64,
    pub knn_precision: Option<f64>,
    pub knn_recall: Option<f64>,
}
