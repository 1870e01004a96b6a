//! Command layer behind the `cardiocascade` binary.
//!
//! A [`RunConfig`] is built from a flat `key = value` file and overrides
//! applied in order, so later sources win. Each command loads the dataset,
//! runs the engine over a case-level worker pool, and writes its outputs
//! under `output`.
//!
//! Exit codes: 0 success, 1 per-case failures, 2 invalid configuration.

use crate::backend::{BackendError, BackendSpec, BinaryClassifier, ClassifyContext};
use crate::calibrate::{calibrate, load_model, save_model, Calibration, CalibrationConfig, CalibrationError};
use crate::cascade::{compose_input, Cascade, ComposeConfig, PathologyClass, PhaseMasks, Thresholds, TraceStep};
use crate::dataset::{scan_dataset, write_phantom_dataset, CaseRecord, Dataset, DatasetError, Phase, PhantomSetSpec};
use crate::evaluate::{evaluate, EvalSetup};
use crate::grid::{Grid2D, Volume3D};
use crate::mask::{LabelMask, Structure};
use crate::metrics::{CaseFailure, MetricsReport};
use crate::nifti::{self, Datatype, NiftiVolume};
use crate::segment::{segment_phase, PipelineMode, SegBackends, SegConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Io { .. } | AppError::Output { .. } => 1,
            AppError::Calibration(CalibrationError::Io { .. }) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AppError + '_ {
    move |source| AppError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn config_err(msg: impl Into<String>) -> AppError {
    AppError::Config(msg.into())
}

/// Which part of the dataset a command runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Test,
    Train,
    All,
}

impl FromStr for Split {
    type Err = AppError;
    fn from_str(s: &str) -> Result<Self, AppError> {
        match s {
            "test" => Ok(Split::Test),
            "train" => Ok(Split::Train),
            "all" => Ok(Split::All),
            _ => Err(config_err(format!("split `{s}` is not one of test, train, all"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Test => "test",
            Split::Train => "train",
            Split::All => "all",
        })
    }
}

/// Cases of `split`, in dataset order.
pub fn select_cases(ds: &Dataset, split: Split) -> Vec<&CaseRecord> {
    match split {
        Split::Test => ds.test_cases().collect(),
        Split::Train => ds.train_cases().collect(),
        Split::All => ds.cases.iter().collect(),
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output: PathBuf,
    pub localizers: [BackendSpec; 3],
    pub segmenters: [BackendSpec; 3],
    pub classifiers: [BackendSpec; 4],
    /// `sigma_model` is replaced by the file at `sigma_model_path` when set.
    pub seg: SegConfig,
    pub sigma_model_path: Option<PathBuf>,
    pub mode: PipelineMode,
    pub thresholds: Thresholds,
    pub compose: ComposeConfig,
    pub repetitions: usize,
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub jobs: usize,
    pub split: Option<Split>,
    pub overlays: bool,
    pub ablate: bool,
    pub calibration: CalibrationConfig,
    /// Input of the `report` command; defaults to `output/report.json`.
    pub report: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output: PathBuf::from("out"),
            localizers: std::array::from_fn(|_| BackendSpec::Oracle),
            segmenters: std::array::from_fn(|_| BackendSpec::Oracle),
            classifiers: std::array::from_fn(|_| BackendSpec::Oracle),
            seg: SegConfig::default(),
            sigma_model_path: None,
            mode: PipelineMode::Full,
            thresholds: Thresholds::default(),
            compose: ComposeConfig::default(),
            repetitions: 10,
            seed: 0,
            jobs: 0,
            split: None,
            overlays: false,
            ablate: false,
            calibration: CalibrationConfig::default(),
            report: None,
        }
    }
}

/// Every key accepted by [`RunConfig::set`].
pub const CONFIG_KEYS: &[&str] = &[
    "dataset",
    "output",
    "backend",
    "loc",
    "seg",
    "loc.rv",
    "loc.myo",
    "loc.lv",
    "seg.rv",
    "seg.myo",
    "seg.lv",
    "classifier",
    "cls.1",
    "cls.2",
    "cls.3",
    "cls.4",
    "model_input_size",
    "margin",
    "threshold",
    "aspect",
    "sigma_model",
    "mode",
    "t1",
    "t2",
    "t3",
    "t4",
    "slices",
    "compose_size",
    "repetitions",
    "seed",
    "jobs",
    "split",
    "overlays",
    "ablate",
    "calibration_scales",
    "sigma_max",
    "sigma_step",
    "report",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, AppError> {
    value
        .parse()
        .map_err(|_| config_err(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, AppError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(config_err(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_spec(key: &str, value: &str) -> Result<BackendSpec, AppError> {
    value.parse().map_err(|e: BackendError| config_err(format!("`{key}`: {e}")))
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, AppError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("line {}: expected key = value, got `{line}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String), AppError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| config_err(format!("override `{s}` is not key=value")))
}

impl RunConfig {
    /// Defaults, then the file at `file`, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, AppError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            for (k, v) in parse_config_text(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), AppError> {
        let structure = |s: &str| match s {
            "rv" => Structure::Rv,
            "myo" => Structure::Myo,
            _ => Structure::Lv,
        };
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "output" => self.output = PathBuf::from(value),
            "backend" => {
                let spec = parse_spec(key, value)?;
                self.localizers = std::array::from_fn(|_| spec.clone());
                self.segmenters = std::array::from_fn(|_| spec.clone());
            }
            "loc" => {
                let spec = parse_spec(key, value)?;
                self.localizers = std::array::from_fn(|_| spec.clone());
            }
            "seg" => {
                let spec = parse_spec(key, value)?;
                self.segmenters = std::array::from_fn(|_| spec.clone());
            }
            "loc.rv" | "loc.myo" | "loc.lv" => {
                self.localizers[structure(&key[4..]).index()] = parse_spec(key, value)?;
            }
            "seg.rv" | "seg.myo" | "seg.lv" => {
                self.segmenters[structure(&key[4..]).index()] = parse_spec(key, value)?;
            }
            "classifier" => {
                let spec = parse_spec(key, value)?;
                self.classifiers = std::array::from_fn(|_| spec.clone());
            }
            "cls.1" | "cls.2" | "cls.3" | "cls.4" => {
                let i = key[4..].parse::<usize>().expect("matched digit") - 1;
                self.classifiers[i] = parse_spec(key, value)?;
            }
            "model_input_size" => self.seg.model_input_size = parse(key, value)?,
            "margin" => self.seg.margin = parse(key, value)?,
            "threshold" => self.seg.threshold = parse(key, value)?,
            "aspect" => self.seg.aspect = parse(key, value)?,
            "sigma_model" => self.sigma_model_path = Some(PathBuf::from(value)),
            "mode" => {
                self.mode = value
                    .parse()
                    .map_err(|_| config_err(format!("`mode`: `{value}` is not one of original, L, D, L+D, L+D+PP")))?
            }
            "t1" | "t2" | "t3" | "t4" => {
                let i = key[1..].parse::<usize>().expect("matched digit") - 1;
                self.thresholds.0[i] = parse(key, value)?;
            }
            "slices" => self.compose.slices = parse(key, value)?,
            "compose_size" => self.compose.size = parse(key, value)?,
            "repetitions" => self.repetitions = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            "split" => self.split = Some(value.parse()?),
            "overlays" => self.overlays = parse_bool(key, value)?,
            "ablate" => self.ablate = parse_bool(key, value)?,
            "calibration_scales" => {
                self.calibration.scales = value
                    .split(',')
                    .map(|s| parse::<f64>(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "sigma_max" => self.calibration.sigma_max = parse(key, value)?,
            "sigma_step" => self.calibration.step = parse(key, value)?,
            "report" => self.report = Some(PathBuf::from(value)),
            _ => {
                return Err(config_err(format!(
                    "unknown key `{key}` (known: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Segmentation settings with the sigma model file applied.
    pub fn seg_config(&self) -> Result<SegConfig, AppError> {
        let mut seg = self.seg.clone();
        if let Some(path) = &self.sigma_model_path {
            seg.sigma_model = load_model(path).map_err(|e| config_err(format!("sigma_model: {e}")))?;
        }
        seg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(seg)
    }

    /// Checks values and that every referenced input path exists.
    pub fn validate(&self, needs_dataset: bool) -> Result<(), AppError> {
        if needs_dataset {
            match &self.dataset {
                None => return Err(config_err("`dataset` is required")),
                Some(p) if !p.is_dir() => {
                    return Err(config_err(format!("dataset root {} is not a directory", p.display())))
                }
                _ => {}
            }
        }
        let roles = self
            .localizers
            .iter()
            .zip(Structure::ALL)
            .map(|(b, s)| (format!("loc.{}", s.name().to_lowercase()), b))
            .chain(self.segmenters.iter().zip(Structure::ALL).map(|(b, s)| (format!("seg.{}", s.name().to_lowercase()), b)))
            .chain(self.classifiers.iter().enumerate().map(|(i, b)| (format!("cls.{}", i + 1), b)));
        for (role, spec) in roles {
            if let Some(p) = spec.path() {
                if !p.is_file() {
                    return Err(config_err(format!("{role}: {} does not exist", p.display())));
                }
            }
        }
        for b in &self.localizers {
            if matches!(b, BackendSpec::Table(_)) {
                return Err(config_err("table backends score classifiers only"));
            }
        }
        for b in &self.segmenters {
            if matches!(b, BackendSpec::Table(_)) {
                return Err(config_err("table backends score classifiers only"));
            }
        }
        for b in &self.classifiers {
            if matches!(b, BackendSpec::Noisy(_)) {
                return Err(config_err("noisy backends apply to segmentation roles only"));
            }
        }
        if let Some(p) = &self.sigma_model_path {
            if !p.is_file() {
                return Err(config_err(format!("sigma_model: {} does not exist", p.display())));
            }
        }
        self.seg_config()?;
        if self.thresholds.0.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(config_err(format!("thresholds {:?} must lie in [0, 1]", self.thresholds.0)));
        }
        if self.compose.slices == 0 || self.compose.size == 0 {
            return Err(config_err("`slices` and `compose_size` must be positive"));
        }
        if self.repetitions == 0 {
            return Err(config_err("`repetitions` must be at least 1"));
        }
        Ok(())
    }

    pub fn eval_setup(&self) -> Result<EvalSetup, AppError> {
        Ok(EvalSetup {
            localizers: self.localizers.clone(),
            segmenters: self.segmenters.clone(),
            classifiers: self.classifiers.clone(),
            seg: self.seg_config()?,
            compose: self.compose,
            thresholds: self.thresholds,
            repetitions: self.repetitions,
            seed: self.seed,
            ablate: self.ablate,
        })
    }

    fn load_cases(&self, default_split: Split) -> Result<(Dataset, Vec<CaseFailure>, Split), AppError> {
        self.validate(true)?;
        let root = self.dataset.as_ref().expect("validated");
        let scan = scan_dataset(root)?;
        let failures = scan
            .failures
            .iter()
            .map(|e| {
                log::warn!("{e}");
                CaseFailure {
                    case_id: e.patient().unwrap_or("dataset").to_string(),
                    message: e.to_string(),
                }
            })
            .collect();
        Ok((scan.dataset, failures, self.split.unwrap_or(default_split)))
    }

    fn ensure_output(&self) -> Result<(), AppError> {
        std::fs::create_dir_all(&self.output).map_err(io_err(&self.output))
    }
}

/// Runs `f` on a pool of `jobs` threads, or the global pool when 0.
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, AppError> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| config_err(format!("jobs: {e}")))?;
    Ok(pool.install(f))
}

fn exit_for(failures: &[CaseFailure]) -> i32 {
    if failures.is_empty() {
        0
    } else {
        1
    }
}

fn sort_failures(failures: &mut [CaseFailure]) {
    failures.sort_by(|a, b| (&a.case_id, &a.message).cmp(&(&b.case_id, &b.message)));
}

// ---------------------------------------------------------------- segment

#[derive(Debug, Clone)]
pub struct SegmentOutcome {
    pub cases: usize,
    pub written: Vec<PathBuf>,
    pub failures: Vec<CaseFailure>,
}

impl SegmentOutcome {
    pub fn exit_code(&self) -> i32 {
        exit_for(&self.failures)
    }
}

/// `{case}_frame{NN}_seg.nii.gz` next to the output root's case directory.
pub fn segmentation_path(output: &Path, case: &CaseRecord, phase: Phase) -> PathBuf {
    output
        .join(&case.id)
        .join(format!("{}_frame{:02}_seg.nii.gz", case.id, case.frame(phase)))
}

/// Stacks per-slice label masks into a uint8 volume with the case spacing.
pub fn label_volume(masks: &[LabelMask], dz: f64) -> Result<NiftiVolume, crate::grid::GridError> {
    let grids: Vec<Grid2D> = masks.iter().map(|m| m.grid().clone()).collect();
    Ok(NiftiVolume::from_volume(Volume3D::from_slices(&grids, dz)?, Datatype::Uint8))
}

/// Contour colors, indexed like [`Structure::ALL`].
pub const OVERLAY_COLORS: [[u8; 3]; 3] = [[230, 50, 50], [60, 200, 60], [60, 140, 255]];

/// Structure contours over the min-max scaled intensity, 8-bit RGB.
pub fn render_overlay(image: &Grid2D, mask: &LabelMask) -> image::RgbImage {
    let (w, h) = image.dims();
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let l = mask.label(x, y);
        if l != 0 {
            let edge = [(0isize, -1isize), (0, 1), (-1, 0), (1, 0)].iter().any(|(dx, dy)| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize || mask.label(nx as usize, ny as usize) != l
            });
            if edge {
                let s = Structure::from_code(l).expect("valid label");
                return image::Rgb(OVERLAY_COLORS[s.index()]);
            }
        }
        let v = ((image.get(x, y) - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([v, v, v])
    })
}

fn segment_case(
    case: &CaseRecord,
    backends: &SegBackends,
    seg: &SegConfig,
    cfg: &RunConfig,
) -> Result<Vec<PathBuf>, String> {
    let dir = cfg.output.join(&case.id);
    std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut written = Vec::new();
    for phase in Phase::ALL {
        let res = segment_phase(case, phase, backends, seg, cfg.mode).map_err(|e| e.to_string())?;
        let masks: Vec<LabelMask> = res.into_iter().map(|r| r.final_mask).collect();
        let path = segmentation_path(&cfg.output, case, phase);
        let vol = label_volume(&masks, case.volume(phase).spacing().2).map_err(|e| e.to_string())?;
        nifti::write_file(&path, &vol).map_err(|e| format!("{}: {e}", path.display()))?;
        written.push(path);
        if cfg.overlays {
            let image = case.volume(phase);
            for (k, m) in masks.iter().enumerate() {
                let path = dir.join(format!("{}_frame{:02}_slice{k:02}.png", case.id, case.frame(phase)));
                render_overlay(&image.slice(k), m)
                    .save(&path)
                    .map_err(|e| format!("{}: {e}", path.display()))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Segments every selected case (default split: test) and writes label
/// volumes, plus overlays when enabled.
pub fn cmd_segment(cfg: &RunConfig) -> Result<SegmentOutcome, AppError> {
    let (ds, mut failures, split) = cfg.load_cases(Split::Test)?;
    let cases = select_cases(&ds, split);
    let seg = cfg.seg_config()?;
    let backends = SegBackends::from_specs(&cfg.localizers, &cfg.segmenters, &seg, cfg.seed)?;
    cfg.ensure_output()?;
    let results: Vec<Result<Vec<PathBuf>, String>> = with_jobs(cfg.jobs, || {
        cases.par_iter().map(|c| segment_case(c, &backends, &seg, cfg)).collect()
    })?;
    let mut written = Vec::new();
    for (case, r) in cases.iter().zip(results) {
        match r {
            Ok(mut w) => written.append(&mut w),
            Err(message) => {
                log::warn!("{}: {message}", case.id);
                failures.push(CaseFailure {
                    case_id: case.id.clone(),
                    message,
                });
            }
        }
    }
    sort_failures(&mut failures);
    Ok(SegmentOutcome {
        cases: cases.len(),
        written,
        failures,
    })
}

// --------------------------------------------------------------- classify

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub case_id: String,
    pub truth: PathologyClass,
    pub predicted: PathologyClass,
    pub trace: Vec<TraceStep>,
}

#[derive(Debug, Clone)]
pub struct ClassifyOutcome {
    pub predictions: Vec<Prediction>,
    pub written: Vec<PathBuf>,
    pub failures: Vec<CaseFailure>,
}

impl ClassifyOutcome {
    pub fn exit_code(&self) -> i32 {
        exit_for(&self.failures)
    }

    pub fn accuracy(&self) -> Option<f64> {
        (!self.predictions.is_empty()).then(|| {
            self.predictions.iter().filter(|p| p.truth == p.predicted).count() as f64 / self.predictions.len() as f64
        })
    }
}

fn classify_case(
    case: &CaseRecord,
    backends: &SegBackends,
    classifiers: &[Box<dyn BinaryClassifier>; 4],
    setup: &EvalSetup,
    mode: PipelineMode,
) -> Result<Prediction, String> {
    let mut masks = PhaseMasks::default();
    for phase in Phase::ALL {
        let res = segment_phase(case, phase, backends, &setup.seg, mode).map_err(|e| e.to_string())?;
        let m = Some(res.into_iter().map(|r| r.final_mask).collect());
        match phase {
            Phase::Ed => masks.ed = m,
            Phase::Es => masks.es = m,
        }
    }
    let input = compose_input(case, &masks, &setup.compose).map_err(|e| e.to_string())?;
    let refs: [&dyn BinaryClassifier; 4] = std::array::from_fn(|i| classifiers[i].as_ref());
    let ctx = ClassifyContext {
        case_id: &case.id,
        truth: Some(case.group),
    };
    let r = Cascade::new(refs, setup.thresholds)
        .classify(&input, &ctx)
        .map_err(|e| e.to_string())?;
    Ok(Prediction {
        case_id: case.id.clone(),
        truth: case.group,
        predicted: r.predicted,
        trace: r.trace,
    })
}

fn trace_text(trace: &[TraceStep]) -> String {
    trace
        .iter()
        .map(|t| format!("c{}={:.4}{}", t.stage.number(), t.score, if t.positive { '+' } else { '-' }))
        .collect::<Vec<_>>()
        .join(";")
}

/// Segments and classifies every selected case; writes
/// `predictions.json` and `predictions.csv`.
pub fn cmd_classify(cfg: &RunConfig) -> Result<ClassifyOutcome, AppError> {
    let (ds, mut failures, split) = cfg.load_cases(Split::Test)?;
    let cases = select_cases(&ds, split);
    let setup = cfg.eval_setup()?;
    let backends = setup.seg_backends(cfg.seed)?;
    let classifiers = setup.stage_classifiers()?;
    let results: Vec<Result<Prediction, String>> = with_jobs(cfg.jobs, || {
        cases
            .par_iter()
            .map(|c| classify_case(c, &backends, &classifiers, &setup, cfg.mode))
            .collect()
    })?;
    let mut predictions = Vec::new();
    for (case, r) in cases.iter().zip(results) {
        match r {
            Ok(p) => predictions.push(p),
            Err(message) => {
                log::warn!("{}: {message}", case.id);
                failures.push(CaseFailure {
                    case_id: case.id.clone(),
                    message,
                })
            }
        }
    }
    sort_failures(&mut failures);
    cfg.ensure_output()?;
    let json_path = cfg.output.join("predictions.json");
    let json = serde_json::to_string_pretty(&predictions).expect("predictions serialize");
    std::fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;

    let csv_path = cfg.output.join("predictions.csv");
    let out_err = |e: csv::Error| AppError::Output {
        path: csv_path.clone(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&csv_path).map_err(out_err)?;
    w.write_record(["case_id", "truth", "predicted", "trace"]).map_err(out_err)?;
    for p in &predictions {
        w.write_record([&p.case_id, p.truth.name(), p.predicted.name(), &trace_text(&p.trace)])
            .map_err(out_err)?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    Ok(ClassifyOutcome {
        predictions,
        written: vec![json_path, csv_path],
        failures,
    })
}

// --------------------------------------------------------------- evaluate

#[derive(Debug, Clone)]
pub struct EvaluateOutcome {
    pub report: MetricsReport,
    pub json_path: PathBuf,
    pub csv_path: PathBuf,
}

impl EvaluateOutcome {
    pub fn exit_code(&self) -> i32 {
        exit_for(&self.report.errors)
    }
}

/// Full evaluation over the selected cases (default split: test); writes
/// `report.json` and `report.csv`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvaluateOutcome, AppError> {
    let (ds, failures, split) = cfg.load_cases(Split::Test)?;
    let cases = select_cases(&ds, split);
    let setup = cfg.eval_setup()?;
    let mut report = with_jobs(cfg.jobs, || evaluate(&cases, &setup))??;
    report.errors.extend(failures);
    sort_failures(&mut report.errors);

    cfg.ensure_output()?;
    let json_path = cfg.output.join("report.json");
    std::fs::write(&json_path, report.to_json() + "\n").map_err(io_err(&json_path))?;
    let csv_path = cfg.output.join("report.csv");
    let csv = report.to_csv().map_err(|e| AppError::Output {
        path: csv_path.clone(),
        message: e.to_string(),
    })?;
    std::fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    Ok(EvaluateOutcome {
        report,
        json_path,
        csv_path,
    })
}

// -------------------------------------------------------- calibrate-sigma

#[derive(Debug, Clone)]
pub struct CalibrateOutcome {
    pub calibration: Calibration,
    pub path: PathBuf,
    pub failures: Vec<CaseFailure>,
}

impl CalibrateOutcome {
    pub fn exit_code(&self) -> i32 {
        exit_for(&self.failures)
    }
}

/// Fits the sigma model on ground truth of the selected cases (default:
/// the training split, or every case when there is none) and writes
/// `sigma_model.json`.
pub fn cmd_calibrate_sigma(cfg: &RunConfig) -> Result<CalibrateOutcome, AppError> {
    let (ds, mut failures, split) = cfg.load_cases(Split::Train)?;
    let mut cases = select_cases(&ds, split);
    if cases.is_empty() && cfg.split.is_none() {
        cases = select_cases(&ds, Split::All);
    }
    let owned: Vec<CaseRecord> = cases.into_iter().cloned().collect();
    let calibration = with_jobs(cfg.jobs, || calibrate(&owned, &cfg.calibration))??;
    cfg.ensure_output()?;
    let path = cfg.output.join("sigma_model.json");
    save_model(&path, &calibration.model)?;
    sort_failures(&mut failures);
    Ok(CalibrateOutcome {
        calibration,
        path,
        failures,
    })
}

// ----------------------------------------------------------------- report

/// Reads a `report.json` back.
pub fn load_report(path: &Path) -> Result<MetricsReport, AppError> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

/// Plain-text tables of a report.
pub fn render_report(r: &MetricsReport) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "cases {}  repetitions {}  seed {}", r.cases, r.repetitions, r.seed);
    let _ = writeln!(s, "\nDice (mean ± stdev over repetitions)");
    let _ = writeln!(s, "{:<6}{:>18}{:>18}{:>18}", "phase", "RV", "MYO", "LV");
    for (phase, m) in &r.dice {
        let _ = write!(s, "{:<6}", phase.name());
        for st in Structure::ALL {
            let v = m.get(&st).copied().unwrap_or(f64::NAN);
            let sd = r.dice_stdev.get(phase).and_then(|m| m.get(&st)).copied().unwrap_or(0.0);
            let _ = write!(s, "{:>18}", format!("{v:.4} ± {sd:.4}"));
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s, "\nclassifier    accuracy       AUC   cases");
    for (name, m) in &r.classification {
        let auc = r.roc.get(name).and_then(|x| x.as_ref()).map(|c| c.auc);
        let total = r.confusion.get(name).map_or(0, |c| c.total());
        let _ = writeln!(s, "{name:<12}{:>10.4}{:>10}{:>8}", m.accuracy, fmt_opt(auc), total);
    }
    let _ = writeln!(s, "\ncascade accuracy {}", fmt_opt(r.cascade_accuracy));
    match &r.aggregate {
        Some(agg) => {
            let _ = writeln!(s, "aggregate accuracy {:.4} ± {:.4}", agg.overall, r.aggregate_stdev);
            for (c, v) in &agg.per_class {
                let _ = writeln!(s, "  {:<5}{v:.4}", c.name());
            }
        }
        None => {
            let _ = writeln!(s, "aggregate accuracy undefined");
        }
    }
    if let Some(p) = &r.published {
        let _ = writeln!(
            s,
            "published {:.4}  delta {:+.4}{}",
            p.published,
            p.delta,
            if p.flagged { "  FLAGGED" } else { "" }
        );
    }
    if let Some(rows) = &r.ablation {
        let _ = writeln!(s, "\nablation       RV       MYO        LV      mean     stdev");
        for row in rows {
            let _ = write!(s, "{:<8}", row.mode.label());
            for st in Structure::ALL {
                let _ = write!(s, "{:>10.4}", row.dice.get(&st).copied().unwrap_or(f64::NAN));
            }
            let _ = writeln!(s, "{:>10.4}{:>10.4}", row.mean, row.stdev);
        }
    }
    if !r.errors.is_empty() {
        let _ = writeln!(s, "\n{} errors", r.errors.len());
        for e in &r.errors {
            let _ = writeln!(s, "  {}: {}", e.case_id, e.message);
        }
    }
    s
}

/// Renders `report` (default `output/report.json`).
pub fn cmd_report(cfg: &RunConfig) -> Result<String, AppError> {
    let path = cfg.report.clone().unwrap_or_else(|| cfg.output.join("report.json"));
    Ok(render_report(&load_report(&path)?))
}

// --------------------------------------------------------------- phantoms

/// Writes a synthetic dataset tree to `root`.
pub fn cmd_phantoms(root: &Path, spec: &PhantomSetSpec) -> Result<usize, AppError> {
    if spec.dims.width < 32 || spec.dims.height < 32 || spec.dims.slices == 0 {
        return Err(config_err("phantoms need at least 32x32 pixels and one slice"));
    }
    let split = write_phantom_dataset(root, spec).map_err(io_err(root))?;
    Ok(split.train.len() + split.test.len())
}
