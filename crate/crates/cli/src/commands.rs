//! Subcommand implementations. Simulation runs in parallel; all file writes happen
//! afterwards on the calling thread.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use asced_core::corrector::online_bank;
use asced_core::detector::{acceleration_curve, weighted_dynamics};
use asced_core::experiment::Trial;
use asced_core::metrics::{knn_precision_recall, mean_nll, sliced_w2, QualityScores};
use asced_core::pgm;
use asced_core::trace::{read_trace, write_trace};
use asced_core::{
    detect, ArtifactMask, ChannelReduce, CorrectionConfig, CorrectionMethod, DetectionScores,
    DetectorConfig, Error, Image, MeanBankMode, Result, RunReport, SampleSeed, SampleSet, Scenario,
    ScoreBank, SpatialMask, SweepRow,
};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Contents of `report.json`: one entry per method, side by side.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub runs: Vec<RunReport>,
}

pub const REPORT_FILE: &str = "report.json";

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

fn reference_set(scenario: &Scenario, n: usize, seed: u64) -> Result<SampleSet> {
    SampleSet::new(
        scenario.model.sample_data(n, SampleSeed::new(seed, u64::MAX)),
        "reference",
    )
}

fn quality(
    scenario: &Scenario,
    finals: Vec<Image>,
    reference: &SampleSet,
    cfg: &RunConfig,
) -> Result<QualityScores> {
    let e = &cfg.experiment;
    let mean = mean_nll(&scenario.model, &finals)?;
    let set = SampleSet::new(finals, "generated")?;
    let w2 = sliced_w2(&set, reference, e.projections, cfg.seed())?;
    let (p, r) = if set.len() > e.knn_k && reference.len() > e.knn_k {
        let (p, r) = knn_precision_recall(reference, &set, e.knn_k)?;
        (Some(p), Some(r))
    } else {
        warn!(
            "knn metrics skipped: need more than {} samples per set",
            e.knn_k
        );
        (None, None)
    };
    Ok(QualityScores {
        sliced_w2: w2,
        mean_nll: mean,
        knn_precision: p,
        knn_recall: r,
    })
}

fn mean_detection(scores: &[DetectionScores]) -> Option<DetectionScores> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    Some(DetectionScores {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        iou: scores.iter().map(|s| s.iou).sum::<f64>() / n,
    })
}

/// Per-pixel maximum of the weighted dynamics over all pairs of the bank.
fn peak_dynamics(bank: &ScoreBank, det: &DetectorConfig) -> Result<Vec<f64>> {
    let mut peak: Vec<f64> = Vec::new();
    for k in 0..bank.len().saturating_sub(1) {
        let g = weighted_dynamics(bank, k, det)?;
        if peak.is_empty() {
            peak = g;
        } else {
            peak.iter_mut().zip(g).for_each(|(p, v)| *p = p.max(v));
        }
    }
    Ok(peak)
}

struct SampleResult {
    index: usize,
    corrected: Trial,
    baseline: Option<Trial>,
    acceleration: Vec<(u32, &'static str, f64)>,
    peak: Vec<f64>,
}

fn simulate(
    scenario: &Scenario,
    det: &DetectorConfig,
    corr: &CorrectionConfig,
    seed: u64,
    index: usize,
) -> Result<SampleResult> {
    let s = SampleSeed::new(seed, index as u64);
    let corrected = scenario.trial(s, det, corr)?;
    let baseline = if corr.method == CorrectionMethod::None {
        None
    } else {
        Some(scenario.trial(s, det, &CorrectionConfig::none())?)
    };
    let bank = online_bank(&corrected.run.trajectory, &scenario.sched, det)?;
    let truth = scenario.truth_mask();
    let (region, label) = if truth.is_empty() {
        (corrected.run.mask.mask.clone(), "mask")
    } else {
        (truth, "trap")
    };
    let mut acceleration = Vec::new();
    if bank.len() >= 3 && !region.is_empty() {
        for (name, m) in [(label, region.clone()), ("background", region.complement())] {
            if m.is_empty() {
                continue;
            }
            for (t, v) in acceleration_curve(&bank, &m, det)? {
                acceleration.push((t, name, v));
            }
        }
    }
    Ok(SampleResult {
        index,
        peak: peak_dynamics(&bank, det)?,
        corrected,
        baseline,
        acceleration,
    })
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub out: PathBuf,
    pub report: ReportFile,
}

pub fn generate(cfg: &RunConfig) -> Result<GenerateSummary> {
    let (scenario, det) = cfg.validate()?;
    let corr = cfg.corrector.clone();
    let seed = cfg.seed();
    let out = cfg.experiment.out.clone();
    let n = cfg.experiment.n_samples;
    info!(
        "generate: {n} samples, method {}, window T_d={} T_c={}, seed {seed}",
        corr.method.as_str(),
        det.t_detect_start,
        det.t_correct
    );

    let t0 = Instant::now();
    let results = pool(cfg.experiment.workers)?.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| simulate(&scenario, &det, &corr, seed, i))
            .collect::<Result<Vec<_>>>()
    })?;
    let t_roll = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let reference = reference_set(&scenario, cfg.experiment.reference_samples, seed)?;
    let has_traps = !scenario.traps.is_empty();
    let mut runs = Vec::new();
    let mut method_views: Vec<(&str, Vec<&Trial>)> = Vec::new();
    if results[0].baseline.is_some() {
        method_views.push(("none", results.iter().filter_map(|r| r.baseline.as_ref()).collect()));
    }
    method_views.push((corr.method.as_str(), results.iter().map(|r| &r.corrected).collect()));
    let baseline_nll: Option<Vec<f64>> = results[0]
        .baseline
        .as_ref()
        .map(|_| results.iter().map(|r| r.baseline.as_ref().expect("paired").nll).collect());
    for (method, trials) in &method_views {
        let finals: Vec<Image> = trials.iter().map(|t| t.run.final_state().clone()).collect();
        let mut report = RunReport {
            label: method.to_string(),
            method: method.to_string(),
            n_samples: n,
            detection: if has_traps {
                mean_detection(&trials.iter().map(|t| t.detection).collect::<Vec<_>>())
            } else {
                None
            },
            quality: quality(&scenario, finals, &reference, cfg)?,
            config: cfg.flatten(),
            ..RunReport::default()
        };
        let nn = trials.len() as f64;
        report.extra.insert(
            "mean_mask_pixels".into(),
            trials.iter().map(|t| t.run.mask.mask.count() as f64).sum::<f64>() / nn,
        );
        if has_traps {
            report.extra.insert(
                "escape_rate".into(),
                trials.iter().filter(|t| t.escaped).count() as f64 / nn,
            );
        }
        if let (Some(base), true) = (&baseline_nll, *method != "none") {
            let better = trials.iter().zip(base).filter(|(t, b)| t.nll < **b).count();
            report.extra.insert("nll_improved_fraction".into(), better as f64 / nn);
        }
        runs.push(report);
    }
    let t_metrics = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    for sub in ["traces", "images", "masks", "heatmaps"] {
        mkdir(&out.join(sub))?;
    }
    let mut samples_csv = String::from(
        "sample,method,escaped,nll,baseline_escaped,baseline_nll,precision,recall,iou,mask_pixels\n",
    );
    let mut accel_csv = String::from("sample,t,region,value\n");
    let shape = scenario.model.shape();
    for r in &results {
        let i = r.index;
        let c = &r.corrected;
        write_trace(&c.run.trajectory, &scenario.sched, &out.join(format!("traces/sample_{i:04}.asctrace")))?;
        pgm::from_image(c.run.final_state(), -1.0, 1.0).write(&out.join(format!("images/sample_{i:04}.pgm")))?;
        pgm::from_mask(&c.run.mask.mask).write(&out.join(format!("masks/sample_{i:04}.pgm")))?;
        if !r.peak.is_empty() {
            pgm::heatmap(&r.peak, shape.h, shape.w)?.write(&out.join(format!("heatmaps/sample_{i:04}.pgm")))?;
        }
        if let Some(b) = &r.baseline {
            pgm::from_image(b.run.final_state(), -1.0, 1.0)
                .write(&out.join(format!("images/sample_{i:04}_uncorrected.pgm")))?;
        }
        let (be, bn) = match &r.baseline {
            Some(b) => (b.escaped.to_string(), b.nll.to_string()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            samples_csv,
            "{i},{},{},{},{be},{bn},{},{},{},{}",
            corr.method.as_str(),
            c.escaped,
            c.nll,
            c.detection.precision,
            c.detection.recall,
            c.detection.iou,
            c.run.mask.mask.count()
        );
        for (t, region, v) in &r.acceleration {
            let _ = writeln!(accel_csv, "{i},{t},{region},{v}");
        }
    }
    write_text(&out.join("samples.csv"), &samples_csv)?;
    write_text(&out.join("acceleration.csv"), &accel_csv)?;
    write_text(&out.join("effective.ini"), &cfg.to_ini_string())?;
    let t_write = t2.elapsed().as_secs_f64();

    for run in &mut runs {
        run.timing.insert("rollouts_s".into(), t_roll);
        run.timing.insert("metrics_s".into(), t_metrics);
        run.timing.insert("write_s".into(), t_write);
        run.validate()?;
    }
    let report = ReportFile { runs };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Numeric(format!("report serialization: {e}")))?;
    write_text(&out.join(REPORT_FILE), &json)?;
    info!("wrote {} samples to {}", n, out.display());
    Ok(GenerateSummary { out, report })
}

/// Drops repeated fractions (keeping the first), warning about each.
pub fn dedup_fractions(fractions: &[f64]) -> Vec<f64> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for &f in fractions {
        if seen.insert(f.to_bits()) {
            out.push(f);
        } else {
            warn!("duplicate T_c fraction {f} ignored");
        }
    }
    out
}

pub fn sweep_tc(cfg: &RunConfig, fractions: &[f64]) -> Result<Vec<SweepRow>> {
    let (scenario, _) = cfg.validate()?;
    let fractions = dedup_fractions(fractions);
    if fractions.len() < 2 {
        return Err(Error::Usage("sweep-tc needs at least two distinct fractions".into()));
    }
    if scenario.traps.is_empty() {
        warn!("sweep-tc without traps: every run trivially escapes");
    }
    let seed = cfg.seed();
    let n = cfg.experiment.n_samples;
    let reference = reference_set(&scenario, cfg.experiment.reference_samples, seed)?;
    let workers = pool(cfg.experiment.workers)?;
    let mut rows = Vec::with_capacity(fractions.len());
    for &f in &fractions {
        let mut det = scenario.detector_at(cfg.detector.td_frac, f)?;
        det.mad_multiplier = cfg.detector.mad_multiplier;
        det.mean_bank_mode = cfg.detector.mean_bank_mode;
        det.channel_reduce = cfg.detector.channel_reduce;
        det.dilation_radius = cfg.detector.dilation_radius;
        let mut corr = cfg.corrector.clone();
        if corr.replace_source_step.is_some_and(|s| s < det.t_correct) {
            corr.replace_source_step = None;
        }
        let trials = workers.install(|| {
            (0..n)
                .into_par_iter()
                .map(|i| scenario.trial(SampleSeed::new(seed, i as u64), &det, &corr))
                .collect::<Result<Vec<_>>>()
        })?;
        let escape_rate = trials.iter().filter(|t| t.escaped).count() as f64 / n as f64;
        let q = quality(
            &scenario,
            trials.iter().map(|t| t.run.final_state().clone()).collect(),
            &reference,
            cfg,
        )?;
        info!("T_c/T={f}: T_c={} escape rate {escape_rate}", det.t_correct);
        rows.push(SweepRow {
            tc_frac: f,
            t_c: det.t_correct,
            t_d: det.t_detect_start,
            escape_rate,
            sliced_w2: q.sliced_w2,
            knn_precision: q.knn_precision,
            knn_recall: q.knn_recall,
        });
    }
    Ok(rows)
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("tc_frac,t_c,t_d,escape_rate,sliced_w2,knn_precision,knn_recall\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.tc_frac,
            r.t_c,
            r.t_d,
            r.escape_rate,
            r.sliced_w2,
            opt_num(r.knn_precision),
            opt_num(r.knn_recall)
        );
    }
    s
}

pub fn write_sweep(cfg: &RunConfig, rows: &[SweepRow]) -> Result<PathBuf> {
    let out = &cfg.experiment.out;
    mkdir(out)?;
    let path = out.join("sweep.csv");
    write_text(&path, &sweep_csv(rows))?;
    write_text(&out.join("effective.ini"), &cfg.to_ini_string())?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub trace: PathBuf,
    pub t_total: Option<u32>,
    pub td_frac: f64,
    pub tc_frac: f64,
    pub mad_multiplier: f64,
    pub dilation: usize,
    pub mean_bank_mode: MeanBankMode,
    pub channel_reduce: ChannelReduce,
    pub out: PathBuf,
}

impl IngestOptions {
    pub fn new(trace: PathBuf, out: PathBuf) -> Self {
        Self {
            trace,
            t_total: None,
            td_frac: asced_core::detector::DEFAULT_TD_FRAC,
            tc_frac: asced_core::detector::DEFAULT_TC_FRAC,
            mad_multiplier: 1.0,
            dilation: 1,
            mean_bank_mode: MeanBankMode::default(),
            channel_reduce: ChannelReduce::default(),
            out,
        }
    }
}

pub fn ingest(opts: &IngestOptions) -> Result<ArtifactMask> {
    let rec = read_trace(&opts.trace)?;
    let first = rec.steps[0];
    let last = *rec.steps.last().expect("non-empty trace");
    let t_total = opts.t_total.unwrap_or(first);
    for (name, f) in [("T_d/T", opts.td_frac), ("T_c/T", opts.tc_frac)] {
        let target = f * f64::from(t_total);
        if target > f64::from(first) || target < f64::from(last) {
            return Err(Error::Config(format!(
                "{name}={f} targets t={target}, outside the trace's steps {first}..{last}"
            )));
        }
    }
    let (t_d, t_c) = asced_core::detector::resolve_window(&rec.steps, t_total, opts.td_frac, opts.tc_frac)?;
    let det = DetectorConfig {
        t_detect_start: t_d,
        t_correct: t_c,
        mad_multiplier: opts.mad_multiplier,
        mean_bank_mode: opts.mean_bank_mode,
        channel_reduce: opts.channel_reduce,
        dilation_radius: opts.dilation,
    };
    det.validate()?;
    let bank = ScoreBank::from_frames(rec.frames(), t_d, t_c)?;
    let found = detect(&bank, &det)?;
    info!(
        "ingest: {} frames, window {t_d}..{t_c}, {} pixels flagged",
        rec.n_steps(),
        found.mask.count()
    );

    let out = &opts.out;
    mkdir(&out.join("heatmaps"))?;
    pgm::from_mask(&found.mask).write(&out.join("mask.pgm"))?;
    let (h, w) = (rec.shape.h, rec.shape.w);
    let mut dyn_csv = String::from("t_a,t_b,tau,mad,flagged\n");
    for (k, p) in found.pairs.iter().enumerate() {
        let _ = writeln!(dyn_csv, "{},{},{},{},{}", p.t_a, p.t_b, p.tau, p.mad, p.flagged);
        let g = weighted_dynamics(&bank, k, &det)?;
        pgm::heatmap(&g, h, w)?.write(&out.join(format!("heatmaps/dyn_{:04}_{:04}.pgm", p.t_a, p.t_b)))?;
    }
    write_text(&out.join("dynamics.csv"), &dyn_csv)?;
    let mut prov = String::new();
    for r in 0..h {
        let row: Vec<String> = (0..w).map(|c| found.provenance[r * w + c].to_string()).collect();
        let _ = writeln!(prov, "{}", row.join(","));
    }
    write_text(&out.join("provenance.csv"), &prov)?;
    let mut acc = String::from("t,region,value\n");
    if bank.len() >= 3 && !found.mask.is_empty() {
        for (name, m) in [("mask", found.mask.clone()), ("background", found.mask.complement())] {
            if m.is_empty() {
                continue;
            }
            for (t, v) in acceleration_curve(&bank, &m, &det)? {
                let _ = writeln!(acc, "{t},{name},{v}");
            }
        }
    } else {
        warn!("acceleration curve skipped: needs a non-empty mask and at least 3 banked steps");
    }
    write_text(&out.join("acceleration.csv"), &acc)?;
    Ok(found)
}

pub fn load_report(dir: &Path) -> Result<ReportFile> {
    let path = dir.join(REPORT_FILE);
    if !path.is_file() {
        return Err(Error::Usage(format!("no {REPORT_FILE} in {}", dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

/// Metric rows as `(name, value per run)`.
fn metric_rows(report: &ReportFile) -> Vec<(String, Vec<Option<f64>>)> {
    let runs = &report.runs;
    let mut rows: Vec<(String, Vec<Option<f64>>)> = vec![
        ("detection.precision".into(), runs.iter().map(|r| r.detection.map(|d| d.precision)).collect()),
        ("detection.recall".into(), runs.iter().map(|r| r.detection.map(|d| d.recall)).collect()),
        ("detection.iou".into(), runs.iter().map(|r| r.detection.map(|d| d.iou)).collect()),
        ("quality.sliced_w2".into(), runs.iter().map(|r| Some(r.quality.sliced_w2)).collect()),
        ("quality.mean_nll".into(), runs.iter().map(|r| Some(r.quality.mean_nll)).collect()),
        ("quality.knn_precision".into(), runs.iter().map(|r| r.quality.knn_precision).collect()),
        ("quality.knn_recall".into(), runs.iter().map(|r| r.quality.knn_recall).collect()),
    ];
    let mut extra: BTreeMap<&str, ()> = BTreeMap::new();
    for r in runs {
        for k in r.extra.keys() {
            extra.insert(k, ());
        }
    }
    for k in extra.keys() {
        rows.push((format!("extra.{k}"), runs.iter().map(|r| r.extra.get(*k).copied()).collect()));
    }
    rows
}

/// Renders the side-by-side table and writes `summary.csv` into `dir`.
pub fn report(dir: &Path) -> Result<String> {
    let rep = load_report(dir)?;
    let rows = metric_rows(&rep);
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut table = format!("{:<width$}", "metric");
    for r in &rep.runs {
        let _ = write!(table, "  {:>14}", r.label);
    }
    table.push('\n');
    let mut csv = String::from("metric");
    for r in &rep.runs {
        let _ = write!(csv, ",{}", r.label);
    }
    csv.push('\n');
    for (name, vals) in &rows {
        let _ = write!(table, "{name:<width$}");
        csv.push_str(name);
        for v in vals {
            let _ = write!(table, "  {:>14}", fmt_opt(*v));
            let _ = write!(csv, ",{}", opt_num(*v));
        }
        table.push('\n');
        csv.push('\n');
    }
    if let Some(r) = rep.runs.first() {
        let _ = writeln!(table, "samples: {}", r.n_samples);
    }
    write_text(&dir.join("summary.csv"), &csv)?;
    let accel = dir.join("acceleration.csv");
    if accel.is_file() {
        let text = fs::read_to_string(&accel).map_err(|e| Error::io(&accel, e))?;
        let mut mean: BTreeMap<(u32, String), (f64, usize)> = BTreeMap::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("{}: bad row '{line}'", accel.display())));
            }
            let t: u32 = f[1].parse().map_err(|_| Error::Format(format!("bad t in '{line}'")))?;
            let v: f64 = f[3].parse().map_err(|_| Error::Format(format!("bad value in '{line}'")))?;
            let e = mean.entry((t, f[2].to_string())).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        let mut fig = String::from("t,region,mean_acceleration\n");
        for ((t, region), (s, n)) in mean.iter().rev() {
            let _ = writeln!(fig, "{t},{region},{}", s / *n as f64);
        }
        write_text(&dir.join("fig_acceleration.csv"), &fig)?;
    }
    Ok(table)
}

/// Mask of sample `i` from a generate run directory.
pub fn stored_mask(dir: &Path, i: usize) -> Result<SpatialMask> {
    pgm::to_mask(&pgm::Gray::read(&dir.join(format!("masks/sample_{i:04}.pgm")))?)
}
