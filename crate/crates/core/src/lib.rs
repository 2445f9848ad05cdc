//! Desk-scale diffusion sampling with analytic mixture scores, synthetic score
//! traps, temporal score-dynamics artifact detection and targeted correction.

pub mod corrector;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod gmm;
pub mod image;
pub mod metrics;
pub mod pgm;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod stats;
pub mod trace;
pub mod trap;

pub use corrector::{
    run_corrected, ClipBound, CorrectedRun, CorrectionConfig, CorrectionMethod, PerturbationMode,
};
pub use detector::{
    detect, detection_metrics, ArtifactMask, ChannelReduce, DetectionScores, DetectorConfig,
    MeanBankMode, ScoreBank,
};
pub use error::{Error, Result};
pub use experiment::{Scenario, SweepRow};
pub use gmm::GmmModel;
pub use image::{Image, Rect, ScoreField, Shape, SpatialMask};
pub use metrics::{RunReport, SampleSet};
pub use rng::{Purpose, SampleSeed};
pub use sampler::{rollout, ScoreSource, Trajectory};
pub use schedule::{NoiseSchedule, ScheduleKind, StepGrid};
pub use trace::{read_trace, write_trace, TraceRecord};
pub use trap::{FreezeKind, TrapMode, TrapSpec, TrappedOracle};
