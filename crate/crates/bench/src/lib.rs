//! Shared inputs for the pipeline benchmarks.

use asced_core::corrector::online_bank;
use asced_core::{CorrectionConfig, DetectorConfig, Image, SampleSeed, SampleSet, Scenario, ScoreBank};

/// Reference scenario with its default detector window.
pub fn reference() -> (Scenario, DetectorConfig) {
    let s = Scenario::reference();
    let det = s.default_detector().expect("reference window is valid");
    (s, det)
}

/// Score bank of one uncorrected reference run.
pub fn reference_bank(seed: u64) -> (ScoreBank, DetectorConfig) {
    let (s, det) = reference();
    let run = s
        .run(SampleSeed::new(seed, 0), &det, &CorrectionConfig::none())
        .expect("reference run");
    (online_bank(&run.trajectory, &s.sched, &det).expect("bank"), det)
}

/// Two independent draws of `n` images from the default mixture.
pub fn sample_pair(n: usize) -> (SampleSet, SampleSet) {
    let s = Scenario::clean();
    let draw = |run| -> Vec<Image> { s.model.sample_data(n, SampleSeed::new(run, 0)) };
    (
        SampleSet::new(draw(1), "a").expect("non-empty"),
        SampleSet::new(draw(2), "b").expect("non-empty"),
    )
}
