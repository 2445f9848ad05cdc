//! Detection calibration over the reference trap scenario.
//!
//! Usage: `cargo run --release -p asced-core --example calibrate_detection [runs] > out.csv`

use asced_core::corrector::CorrectionConfig;
use asced_core::experiment::Scenario;
use asced_core::{detection_metrics, SampleSeed};

fn main() -> asced_core::Result<()> {
    let runs: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(100);
    let s = Scenario::reference();
    let det = s.default_detector()?;
    let truth = s.truth_mask();
    println!("seed,precision,recall,iou,mask_pixels,core_pixels,max_provenance");
    for seed in 0..runs {
        let run = s.run(SampleSeed::new(seed, 0), &det, &CorrectionConfig::none())?;
        let m = detection_metrics(&run.mask.mask, &truth)?;
        println!(
            "{seed},{:.12},{:.12},{:.12},{},{},{}",
            m.precision,
            m.recall,
            m.iou,
            run.mask.mask.count(),
            run.mask.core.count(),
            run.mask.provenance.iter().max().unwrap_or(&0)
        );
    }
    Ok(())
}
