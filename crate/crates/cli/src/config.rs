//! Sectioned INI run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use asced_core::detector::{resolve_window, DEFAULT_TC_FRAC, DEFAULT_TD_FRAC};
use asced_core::gmm::default_templates;
use asced_core::schedule::ScheduleParams;
use asced_core::{
    ChannelReduce, ClipBound, CorrectionConfig, CorrectionMethod, DetectorConfig, Error, FreezeKind,
    GmmModel, MeanBankMode, NoiseSchedule, PerturbationMode, Rect, Result, Scenario, ScheduleKind,
    StepGrid, TrapMode, TrapSpec,
};
use ini::Ini;

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub t_total: u32,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
    pub sigma0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSection {
    pub td_frac: f64,
    pub tc_frac: f64,
    pub mad_multiplier: f64,
    pub mean_bank_mode: MeanBankMode,
    pub channel_reduce: ChannelReduce,
    pub dilation_radius: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSection {
    pub n_samples: usize,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub reference_samples: usize,
    pub projections: usize,
    pub knn_k: usize,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub schedule: ScheduleSection,
    pub nfe: u32,
    pub model: ModelSection,
    pub traps: Vec<(String, TrapSpec)>,
    pub detector: DetectorSection,
    pub corrector: CorrectionConfig,
    pub experiment: ExperimentSection,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub method: Option<CorrectionMethod>,
    pub tc_frac: Option<f64>,
    pub td_frac: Option<f64>,
    pub gamma: Option<f64>,
    pub perturbation: Option<PerturbationMode>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = ScheduleParams::default();
        Self {
            schedule: ScheduleSection {
                kind: ScheduleKind::Linear,
                t_total: 1000,
                beta_min: p.beta_min,
                beta_max: p.beta_max,
            },
            nfe: 25,
            model: ModelSection {
                height: 16,
                width: 16,
                weights: vec![0.25; 4],
                sigma0: vec![0.05; 4],
            },
            traps: Vec::new(),
            detector: DetectorSection {
                td_frac: DEFAULT_TD_FRAC,
                tc_frac: DEFAULT_TC_FRAC,
                mad_multiplier: 1.0,
                mean_bank_mode: MeanBankMode::default(),
                channel_reduce: ChannelReduce::default(),
                dilation_radius: 1,
            },
            corrector: CorrectionConfig::default(),
            experiment: ExperimentSection {
                n_samples: 16,
                seed: None,
                out: PathBuf::from("asced-out"),
                reference_samples: 256,
                projections: 64,
                knn_k: 3,
                workers: 1,
            },
        }
    }
}

const KEYS: &[(&str, &[&str])] = &[
    ("schedule", &["kind", "t_total", "beta_min", "beta_max"]),
    ("grid", &["nfe"]),
    ("model", &["templates", "height", "width", "weights", "sigma0"]),
    ("detector", &["td_frac", "tc_frac", "mad_multiplier", "mean_bank_mode", "channel_reduce", "dilation_radius"]),
    ("corrector", &["method", "gamma", "perturbation", "replace_source_step", "clip_bound", "xi_seed"]),
    ("experiment", &["n_samples", "seed", "out", "reference_samples", "projections", "knn_k", "workers"]),
];

const TRAP_KEYS: &[&str] = &["region", "trigger_step", "spike_steps", "spike_gain", "mode", "freeze", "pattern_seed"];

fn parse<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse '{v}'")))
}

fn parse_list<T: FromStr>(section: &str, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(section, key, p)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn trap_mode(s: &str) -> Result<TrapMode> {
    match s {
        "spike_then_freeze" => Ok(TrapMode::SpikeThenFreeze),
        "freeze_only" => Ok(TrapMode::FreezeOnly),
        _ => Err(Error::Config(format!("unknown trap mode '{s}'"))),
    }
}

fn freeze_kind(s: &str) -> Result<FreezeKind> {
    match s {
        "noise" => Ok(FreezeKind::Noise),
        "score" => Ok(FreezeKind::Score),
        _ => Err(Error::Config(format!("unknown trap freeze '{s}'"))),
    }
}

fn schedule_kind_str(k: ScheduleKind) -> &'static str {
    match k {
        ScheduleKind::Linear => "linear",
        ScheduleKind::Cosine => "cosine",
    }
}

fn bank_mode_str(m: MeanBankMode) -> &'static str {
    match m {
        MeanBankMode::MeanAbsWeighted => "mean_abs_weighted",
        MeanBankMode::MeanAbsRaw => "mean_abs_raw",
    }
}

fn reduce_str(r: ChannelReduce) -> &'static str {
    match r {
        ChannelReduce::L2 => "l2_over_channels",
        ChannelReduce::Union => "union_over_channels",
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_ini(ini: &Ini) -> Result<Self> {
        let mut cfg = Self::default();
        for (name, props) in ini.iter() {
            let Some(name) = name else {
                if props.is_empty() {
                    continue;
                }
                return Err(Error::Config("keys outside any section".into()));
            };
            if let Some(label) = name.strip_prefix("trap.") {
                cfg.traps.push((label.to_string(), Self::trap_from(name, props)?));
                continue;
            }
            let allowed = KEYS
                .iter()
                .find(|(s, _)| *s == name)
                .ok_or_else(|| Error::Config(format!("unknown section [{name}]")))?
                .1;
            for (key, v) in props.iter() {
                if !allowed.contains(&key) {
                    return Err(Error::Config(format!("[{name}] unknown key '{key}'")));
                }
                cfg.set(name, key, v.trim())?;
            }
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        match (section, key) {
            ("schedule", "kind") => self.schedule.kind = v.parse()?,
            ("schedule", "t_total") => self.schedule.t_total = parse(section, key, v)?,
            ("schedule", "beta_min") => self.schedule.beta_min = parse(section, key, v)?,
            ("schedule", "beta_max") => self.schedule.beta_max = parse(section, key, v)?,
            ("grid", "nfe") => self.nfe = parse(section, key, v)?,
            ("model", "templates") => {
                if v != "default" {
                    return Err(Error::Config(format!("[model] templates: only 'default' is available, got '{v}'")));
                }
            }
            ("model", "height") => self.model.height = parse(section, key, v)?,
            ("model", "width") => self.model.width = parse(section, key, v)?,
            ("model", "weights") => self.model.weights = parse_list(section, key, v)?,
            ("model", "sigma0") => self.model.sigma0 = parse_list(section, key, v)?,
            ("detector", "td_frac") => self.detector.td_frac = parse(section, key, v)?,
            ("detector", "tc_frac") => self.detector.tc_frac = parse(section, key, v)?,
            ("detector", "mad_multiplier") => self.detector.mad_multiplier = parse(section, key, v)?,
            ("detector", "mean_bank_mode") => self.detector.mean_bank_mode = v.parse()?,
            ("detector", "channel_reduce") => self.detector.channel_reduce = v.parse()?,
            ("detector", "dilation_radius") => self.detector.dilation_radius = parse(section, key, v)?,
            ("corrector", "method") => self.corrector.method = v.parse()?,
            ("corrector", "gamma") => self.corrector.gamma = parse(section, key, v)?,
            ("corrector", "perturbation") => self.corrector.perturbation_mode = v.parse()?,
            ("corrector", "replace_source_step") => {
                self.corrector.replace_source_step = optional(v, |v| parse(section, key, v))?
            }
            ("corrector", "clip_bound") => self.corrector.clip_bound = v.parse()?,
            ("corrector", "xi_seed") => self.corrector.xi_seed = optional(v, |v| parse(section, key, v))?,
            ("experiment", "n_samples") => self.experiment.n_samples = parse(section, key, v)?,
            ("experiment", "seed") => self.experiment.seed = optional(v, |v| parse(section, key, v))?,
            ("experiment", "out") => self.experiment.out = PathBuf::from(v),
            ("experiment", "reference_samples") => self.experiment.reference_samples = parse(section, key, v)?,
            ("experiment", "projections") => self.experiment.projections = parse(section, key, v)?,
            ("experiment", "knn_k") => self.experiment.knn_k = parse(section, key, v)?,
            ("experiment", "workers") => self.experiment.workers = parse(section, key, v)?,
            _ => return Err(Error::Config(format!("[{section}] unknown key '{key}'"))),
        }
        Ok(())
    }

    fn trap_from(name: &str, props: &ini::Properties) -> Result<TrapSpec> {
        for (key, _) in props.iter() {
            if !TRAP_KEYS.contains(&key) {
                return Err(Error::Config(format!("[{name}] unknown key '{key}'")));
            }
        }
        let get = |k: &str| {
            props
                .get(k)
                .map(str::trim)
                .ok_or_else(|| Error::Config(format!("[{name}] missing '{k}'")))
        };
        let r: Vec<usize> = parse_list(name, "region", get("region")?)?;
        if r.len() != 4 {
            return Err(Error::Config(format!(
                "[{name}] region takes row0,col0,row1,col1 (end-exclusive)"
            )));
        }
        Ok(TrapSpec {
            region: Rect::new(r[0], r[1], r[2], r[3]),
            trigger_step: parse(name, "trigger_step", get("trigger_step")?)?,
            spike_steps: match props.get("spike_steps") {
                Some(v) => parse(name, "spike_steps", v)?,
                None => 3,
            },
            spike_gain: match props.get("spike_gain") {
                Some(v) => parse(name, "spike_gain", v)?,
                None => 8.0,
            },
            mode: trap_mode(props.get("mode").map(str::trim).unwrap_or("spike_then_freeze"))?,
            freeze: freeze_kind(props.get("freeze").map(str::trim).unwrap_or("noise"))?,
            pattern_seed: match props.get("pattern_seed") {
                Some(v) => parse(name, "pattern_seed", v)?,
                None => 0,
            },
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.experiment.seed = Some(s);
        }
        if let Some(p) = &o.out {
            self.experiment.out = p.clone();
        }
        if let Some(w) = o.workers {
            self.experiment.workers = w;
        }
        if let Some(m) = o.method {
            self.corrector.method = m;
        }
        if let Some(f) = o.tc_frac {
            self.detector.tc_frac = f;
        }
        if let Some(f) = o.td_frac {
            self.detector.td_frac = f;
        }
        if let Some(g) = o.gamma {
            self.corrector.gamma = g;
        }
        if let Some(p) = o.perturbation {
            self.corrector.perturbation_mode = p;
        }
    }

    /// Seed resolution: explicit value, then `ASCED_SEED`, then the file, then 0.
    pub fn resolve_seed(&mut self, cli_seed: Option<u64>, env: Option<&str>) -> Result<u64> {
        let seed = match (cli_seed, env) {
            (Some(s), _) => s,
            (None, Some(e)) => e
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("ASCED_SEED is not an unsigned integer: '{e}'")))?,
            (None, None) => self.experiment.seed.unwrap_or(0),
        };
        self.experiment.seed = Some(seed);
        Ok(seed)
    }

    pub fn seed(&self) -> u64 {
        self.experiment.seed.unwrap_or(0)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(
            self.schedule.kind,
            self.schedule.t_total,
            ScheduleParams {
                beta_min: self.schedule.beta_min,
                beta_max: self.schedule.beta_max,
                ..ScheduleParams::default()
            },
        )
    }

    pub fn grid(&self) -> Result<StepGrid> {
        StepGrid::uniform(self.schedule.t_total, self.nfe)
    }

    pub fn model(&self) -> Result<GmmModel> {
        let m = &self.model;
        let templates = default_templates(m.height, m.width);
        let k = templates.len();
        let sigma0 = if m.sigma0.len() == 1 { vec![m.sigma0[0]; k] } else { m.sigma0.clone() };
        if m.weights.len() != k || sigma0.len() != k {
            return Err(Error::Config(format!(
                "[model] weights and sigma0 need {k} entries (or one sigma0)"
            )));
        }
        GmmModel::new(templates, m.weights.clone(), sigma0)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let s = Scenario {
            sched: self.schedule()?,
            grid: self.grid()?,
            model: self.model()?,
            traps: self.traps.iter().map(|(_, t)| t.clone()).collect(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn detector(&self, grid: &StepGrid) -> Result<DetectorConfig> {
        let d = &self.detector;
        let (t_d, t_c) = resolve_window(grid.timesteps(), self.schedule.t_total, d.td_frac, d.tc_frac)?;
        let cfg = DetectorConfig {
            t_detect_start: t_d,
            t_correct: t_c,
            mad_multiplier: d.mad_multiplier,
            mean_bank_mode: d.mean_bank_mode,
            channel_reduce: d.channel_reduce,
            dilation_radius: d.dilation_radius,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything a run needs and returns the resolved pieces.
    pub fn validate(&self) -> Result<(Scenario, DetectorConfig)> {
        let e = &self.experiment;
        if e.n_samples == 0 {
            return Err(Error::Config("[experiment] n_samples must be >= 1".into()));
        }
        if e.projections == 0 || e.knn_k == 0 || e.reference_samples == 0 {
            return Err(Error::Config(
                "[experiment] projections, knn_k and reference_samples must be >= 1".into(),
            ));
        }
        let scenario = self.scenario()?;
        let det = self.detector(&scenario.grid)?;
        self.corrector.validate(&det)?;
        Ok((scenario, det))
    }

    pub fn to_ini(&self) -> Ini {
        let mut ini = Ini::new();
        let s = &self.schedule;
        ini.with_section(Some("schedule"))
            .set("kind", schedule_kind_str(s.kind))
            .set("t_total", s.t_total.to_string())
            .set("beta_min", s.beta_min.to_string())
            .set("beta_max", s.beta_max.to_string());
        ini.with_section(Some("grid")).set("nfe", self.nfe.to_string());
        let m = &self.model;
        ini.with_section(Some("model"))
            .set("templates", "default")
            .set("height", m.height.to_string())
            .set("width", m.width.to_string())
            .set("weights", join(&m.weights))
            .set("sigma0", join(&m.sigma0));
        for (label, t) in &self.traps {
            let r = t.region;
            ini.with_section(Some(format!("trap.{label}")))
                .set("region", join(&[r.row0, r.col0, r.row1, r.col1]))
                .set("trigger_step", t.trigger_step.to_string())
                .set("spike_steps", t.spike_steps.to_string())
                .set("spike_gain", t.spike_gain.to_string())
                .set(
                    "mode",
                    match t.mode {
                        TrapMode::SpikeThenFreeze => "spike_then_freeze",
                        TrapMode::FreezeOnly => "freeze_only",
                    },
                )
                .set(
                    "freeze",
                    match t.freeze {
                        FreezeKind::Noise => "noise",
                        FreezeKind::Score => "score",
                    },
                )
                .set("pattern_seed", t.pattern_seed.to_string());
        }
        let d = &self.detector;
        ini.with_section(Some("detector"))
            .set("td_frac", d.td_frac.to_string())
            .set("tc_frac", d.tc_frac.to_string())
            .set("mad_multiplier", d.mad_multiplier.to_string())
            .set("mean_bank_mode", bank_mode_str(d.mean_bank_mode))
            .set("channel_reduce", reduce_str(d.channel_reduce))
            .set("dilation_radius", d.dilation_radius.to_string());
        let c = &self.corrector;
        ini.with_section(Some("corrector"))
            .set("method", c.method.as_str())
            .set("gamma", c.gamma.to_string())
            .set("perturbation", c.perturbation_mode.as_str())
            .set("replace_source_step", opt_str(c.replace_source_step))
            .set(
                "clip_bound",
                match c.clip_bound {
                    ClipBound::Tau => "tau".to_string(),
                    ClipBound::Fixed(b) => b.to_string(),
                },
            )
            .set("xi_seed", opt_str(c.xi_seed));
        let e = &self.experiment;
        ini.with_section(Some("experiment"))
            .set("n_samples", e.n_samples.to_string())
            .set("seed", opt_str(e.seed))
            .set("out", e.out.display().to_string())
            .set("reference_samples", e.reference_samples.to_string())
            .set("projections", e.projections.to_string())
            .set("knn_k", e.knn_k.to_string())
            .set("workers", e.workers.to_string());
        ini
    }

    pub fn to_ini_string(&self) -> String {
        let mut buf = Vec::new();
        self.to_ini().write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ini output is utf-8")
    }

    /// `section.key` → value for every entry.
    pub fn flatten(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for (section, props) in self.to_ini().iter() {
            let Some(section) = section else { continue };
            for (k, v) in props.iter() {
                out.insert(format!("{section}.{k}"), v.to_string());
            }
        }
        out
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("INI syntax: {e}")))?;
        Self::from_ini(&ini)
    }
}

fn opt_str<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn optional<T>(v: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    if v.is_empty() {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}
