//! Predictor plug-ins.
//!
//! Segmentation and localization run through [`SlicePredictor`], pathology
//! scoring through [`BinaryClassifier`]. Built-in kinds cover ground-truth
//! oracles, morphologically perturbed oracles, constants and score tables so
//! the whole engine runs without trained networks. Portable model files are
//! executed by the optional `onnx` feature.

#[cfg(feature = "onnx")]
mod onnx;

use crate::cascade::{ClassifierInput, PathologyClass, Stage};
use crate::dataset::Phase;
use crate::grid::{resize, Grid2D, ResizeMode};
use crate::mask::{dilate, erode, BinaryMask, LabelMask, Region, Structure};
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("backend `{backend}` needs ground truth for {case_id} but none was supplied")]
    MissingGroundTruth { backend: String, case_id: String },
    #[error("backend `{backend}` has no score for case {case_id}")]
    MissingScore { backend: String, case_id: String },
    #[error("backend `{backend}` returned {got:?}, expected {expected:?}")]
    BadOutputShape {
        backend: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("model runtime unavailable for `{0}`: rebuild with the `onnx` feature")]
    RuntimeUnavailable(PathBuf),
    #[error("failed to load `{path}`: {message}")]
    Load { path: PathBuf, message: String },
    #[error("inference failed in `{backend}`: {message}")]
    Inference { backend: String, message: String },
    #[error("invalid backend spec `{spec}`: {reason}")]
    InvalidSpec { spec: String, reason: String },
}

pub type Result<T> = std::result::Result<T, BackendError>;

/// What a predictor is looking at. The image passed alongside has already
/// been cropped to `region` and resampled to the model resolution; oracle
/// kinds use the ground truth to reproduce that view. Real models ignore it.
#[derive(Debug, Clone, Copy)]
pub struct SliceContext<'a> {
    pub case_id: &'a str,
    pub phase: Phase,
    pub slice_index: usize,
    pub source_dims: (usize, usize),
    pub region: Region,
    pub ground_truth: Option<&'a LabelMask>,
}

/// One-structure probability model over a fixed-resolution intensity image.
///
/// Implementations must return a map with the input's dimensions and values
/// in `[0, 1]`, and must be deterministic.
pub trait SlicePredictor: Send + Sync {
    fn name(&self) -> &str;

    fn predict(&self, image: &Grid2D, ctx: &SliceContext<'_>) -> Result<Grid2D>;

    /// `false` makes the engine serialize calls to this backend.
    fn concurrent(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifyContext<'a> {
    pub case_id: &'a str,
    pub truth: Option<PathologyClass>,
}

/// Scores the probability of one cascade stage's positive side.
pub trait BinaryClassifier: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, input: &ClassifierInput, ctx: &ClassifyContext<'_>) -> Result<f64>;

    fn concurrent(&self) -> bool {
        true
    }
}

/// Checks the predictor output contract and clamps tiny excursions.
pub(crate) fn check_probability_map(name: &str, out: Grid2D, dims: (usize, usize)) -> Result<Grid2D> {
    if out.dims() != dims {
        return Err(BackendError::BadOutputShape {
            backend: name.to_string(),
            got: vec![out.width(), out.height()],
            expected: vec![dims.0, dims.1],
        });
    }
    Ok(out.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
}

/// Ground truth for `structure` in the view described by `ctx`, resampled
/// bilinearly to `dims` (a soft map).
fn ground_truth_view(
    name: &str,
    structure: Structure,
    ctx: &SliceContext<'_>,
    dims: (usize, usize),
) -> Result<Grid2D> {
    let gt = ctx.ground_truth.ok_or_else(|| BackendError::MissingGroundTruth {
        backend: name.to_string(),
        case_id: ctx.case_id.to_string(),
    })?;
    let r = ctx.region;
    let crop = gt.structure(structure).into_grid().crop(r.x0, r.y0, r.x1, r.y1);
    Ok(resize(&crop, dims.0, dims.1, ResizeMode::Bilinear))
}

/// Returns the ground truth of its structure.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    name: String,
    structure: Structure,
}

impl OraclePredictor {
    pub fn new(structure: Structure) -> Self {
        Self {
            name: format!("oracle[{structure}]"),
            structure,
        }
    }
}

impl SlicePredictor for OraclePredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, image: &Grid2D, ctx: &SliceContext<'_>) -> Result<Grid2D> {
        ground_truth_view(&self.name, self.structure, ctx, image.dims())
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit key for a slice view, independent of process and platform.
fn view_key(seed: u64, structure: Structure, ctx: &SliceContext<'_>) -> u64 {
    let mut h = mix64(seed);
    for b in ctx.case_id.bytes() {
        h = mix64(h ^ b as u64);
    }
    h = mix64(h ^ ctx.phase as u64);
    h = mix64(h ^ ctx.slice_index as u64);
    mix64(h ^ structure.code() as u64)
}

/// Ground truth binarized at the model resolution, then eroded or dilated by
/// `px` model pixels. The direction is a deterministic coin flip per
/// `(seed, case, phase, slice, structure)`.
#[derive(Debug, Clone)]
pub struct NoisyOracle {
    name: String,
    structure: Structure,
    px: usize,
    seed: u64,
}

impl NoisyOracle {
    pub fn new(structure: Structure, px: usize, seed: u64) -> Self {
        Self {
            name: format!("noisy:{px}[{structure}]"),
            structure,
            px,
            seed,
        }
    }
}

impl SlicePredictor for NoisyOracle {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, image: &Grid2D, ctx: &SliceContext<'_>) -> Result<Grid2D> {
        let soft = ground_truth_view(&self.name, self.structure, ctx, image.dims())?;
        let mask = BinaryMask::from_probability(&soft, 0.5, self.structure);
        let noisy = if view_key(self.seed, self.structure, ctx) & 1 == 0 {
            dilate(&mask, self.px)
        } else {
            erode(&mask, self.px)
        };
        Ok(noisy.into_grid())
    }
}

#[derive(Debug, Clone)]
pub struct ConstantPredictor {
    name: String,
    value: f64,
}

impl ConstantPredictor {
    pub fn new(value: f64) -> Self {
        Self {
            name: format!("constant:{value}"),
            value: value.clamp(0.0, 1.0),
        }
    }
}

impl SlicePredictor for ConstantPredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, image: &Grid2D, _ctx: &SliceContext<'_>) -> Result<Grid2D> {
        Ok(Grid2D::filled(image.width(), image.height(), self.value))
    }
}

/// Scores 1 for the stage's positive side of the true class, else 0.
#[derive(Debug, Clone)]
pub struct OracleClassifier {
    name: String,
    stage: Stage,
}

impl OracleClassifier {
    pub fn new(stage: Stage) -> Self {
        Self {
            name: format!("oracle[c{}]", stage.number()),
            stage,
        }
    }
}

impl BinaryClassifier for OracleClassifier {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, _input: &ClassifierInput, ctx: &ClassifyContext<'_>) -> Result<f64> {
        let truth = ctx.truth.ok_or_else(|| BackendError::MissingGroundTruth {
            backend: self.name.clone(),
            case_id: ctx.case_id.to_string(),
        })?;
        Ok(if self.stage.is_positive(truth) { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone)]
pub struct ConstantClassifier {
    name: String,
    value: f64,
}

impl ConstantClassifier {
    pub fn new(value: f64) -> Self {
        Self {
            name: format!("constant:{value}"),
            value: value.clamp(0.0, 1.0),
        }
    }
}

impl BinaryClassifier for ConstantClassifier {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, _input: &ClassifierInput, _ctx: &ClassifyContext<'_>) -> Result<f64> {
        Ok(self.value)
    }
}

/// Per-case score lookup, e.g. precomputed model outputs.
#[derive(Debug, Clone)]
pub struct TableClassifier {
    name: String,
    scores: HashMap<String, f64>,
}

impl TableClassifier {
    pub fn new(name: impl Into<String>, scores: HashMap<String, f64>) -> Self {
        Self {
            name: name.into(),
            scores,
        }
    }

    /// Reads `case_id,score` rows (an optional header row is skipped).
    pub fn from_csv(path: &Path) -> Result<Self> {
        let load_err = |message: String| BackendError::Load {
            path: path.to_path_buf(),
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| load_err(e.to_string()))?;
        let mut scores = HashMap::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| load_err(e.to_string()))?;
            if row.len() != 2 {
                return Err(load_err(format!("row {} has {} fields, expected 2", i + 1, row.len())));
            }
            match row[1].parse::<f64>() {
                Ok(score) => {
                    scores.insert(row[0].to_string(), score.clamp(0.0, 1.0));
                }
                Err(_) if i == 0 => continue,
                Err(_) => return Err(load_err(format!("row {} has a non-numeric score", i + 1))),
            }
        }
        Ok(Self::new(format!("table:{}", path.display()), scores))
    }
}

impl BinaryClassifier for TableClassifier {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, _input: &ClassifierInput, ctx: &ClassifyContext<'_>) -> Result<f64> {
        self.scores
            .get(ctx.case_id)
            .copied()
            .ok_or_else(|| BackendError::MissingScore {
                backend: self.name.clone(),
                case_id: ctx.case_id.to_string(),
            })
    }
}

/// Serializes calls into a backend that declared itself single-threaded.
pub struct Serialized<T> {
    inner: T,
    lock: Mutex<()>,
}

impl<T> Serialized<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            lock: Mutex::new(()),
        }
    }
}

impl SlicePredictor for Serialized<Box<dyn SlicePredictor>> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn predict(&self, image: &Grid2D, ctx: &SliceContext<'_>) -> Result<Grid2D> {
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        self.inner.predict(image, ctx)
    }
}

impl BinaryClassifier for Serialized<Box<dyn BinaryClassifier>> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn score(&self, input: &ClassifierInput, ctx: &ClassifyContext<'_>) -> Result<f64> {
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        self.inner.score(input, ctx)
    }
}

/// Wraps single-threaded predictors so they are safe to share across workers.
pub fn share_predictor(p: Box<dyn SlicePredictor>) -> Box<dyn SlicePredictor> {
    if p.concurrent() {
        p
    } else {
        Box::new(Serialized::new(p))
    }
}

pub fn share_classifier(c: Box<dyn BinaryClassifier>) -> Box<dyn BinaryClassifier> {
    if c.concurrent() {
        c
    } else {
        Box::new(Serialized::new(c))
    }
}

/// Textual backend selector: `oracle`, `noisy:<px>`, `constant:<v>`,
/// `table:<path>` or `model:<path>`.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Oracle,
    Noisy(usize),
    Constant(f64),
    Table(PathBuf),
    Model(PathBuf),
}

impl FromStr for BackendSpec {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self> {
        let invalid = |reason: &str| BackendError::InvalidSpec {
            spec: s.to_string(),
            reason: reason.to_string(),
        };
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        match (kind, arg) {
            ("oracle", None) => Ok(BackendSpec::Oracle),
            ("noisy", Some(a)) => a
                .parse()
                .map(BackendSpec::Noisy)
                .map_err(|_| invalid("pixel count must be a non-negative integer")),
            ("constant", Some(a)) => match a.parse::<f64>() {
                Ok(v) if (0.0..=1.0).contains(&v) => Ok(BackendSpec::Constant(v)),
                _ => Err(invalid("value must be a number in [0, 1]")),
            },
            ("table", Some(a)) if !a.is_empty() => Ok(BackendSpec::Table(PathBuf::from(a))),
            ("model", Some(a)) if !a.is_empty() => Ok(BackendSpec::Model(PathBuf::from(a))),
            _ => Err(invalid(
                "expected oracle | noisy:<px> | constant:<v> | table:<path> | model:<path>",
            )),
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Oracle => f.write_str("oracle"),
            BackendSpec::Noisy(px) => write!(f, "noisy:{px}"),
            BackendSpec::Constant(v) => write!(f, "constant:{v}"),
            BackendSpec::Table(p) => write!(f, "table:{}", p.display()),
            BackendSpec::Model(p) => write!(f, "model:{}", p.display()),
        }
    }
}

impl BackendSpec {
    /// Files the spec depends on, for config validation.
    pub fn path(&self) -> Option<&Path> {
        match self {
            BackendSpec::Table(p) | BackendSpec::Model(p) => Some(p),
            _ => None,
        }
    }

    /// Instantiates a slice predictor. `input_dims` is the model resolution,
    /// `seed` drives the noisy kind.
    pub fn build_predictor(
        &self,
        structure: Structure,
        input_dims: (usize, usize),
        seed: u64,
    ) -> Result<Box<dyn SlicePredictor>> {
        let _ = input_dims;
        let p: Box<dyn SlicePredictor> = match self {
            BackendSpec::Oracle => Box::new(OraclePredictor::new(structure)),
            BackendSpec::Noisy(px) => Box::new(NoisyOracle::new(structure, *px, seed)),
            BackendSpec::Constant(v) => Box::new(ConstantPredictor::new(*v)),
            BackendSpec::Table(_) => {
                return Err(BackendError::InvalidSpec {
                    spec: self.to_string(),
                    reason: "table backends score classifiers only".into(),
                })
            }
            #[cfg(feature = "onnx")]
            BackendSpec::Model(path) => Box::new(onnx::OnnxPredictor::load(path, input_dims)?),
            #[cfg(not(feature = "onnx"))]
            BackendSpec::Model(path) => return Err(BackendError::RuntimeUnavailable(path.clone())),
        };
        Ok(share_predictor(p))
    }

    /// Instantiates a cascade classifier. `input_shape` is
    /// `(slices, phases, channels, height, width)` of the composed input.
    pub fn build_classifier(
        &self,
        stage: Stage,
        input_shape: [usize; 5],
    ) -> Result<Box<dyn BinaryClassifier>> {
        let _ = input_shape;
        let c: Box<dyn BinaryClassifier> = match self {
            BackendSpec::Oracle => Box::new(OracleClassifier::new(stage)),
            BackendSpec::Constant(v) => Box::new(ConstantClassifier::new(*v)),
            BackendSpec::Table(path) => Box::new(TableClassifier::from_csv(path)?),
            BackendSpec::Noisy(_) => {
                return Err(BackendError::InvalidSpec {
                    spec: self.to_string(),
                    reason: "noisy backends apply to segmentation roles only".into(),
                })
            }
            #[cfg(feature = "onnx")]
            BackendSpec::Model(path) => Box::new(onnx::OnnxClassifier::load(path, input_shape)?),
            #[cfg(not(feature = "onnx"))]
            BackendSpec::Model(path) => return Err(BackendError::RuntimeUnavailable(path.clone())),
        };
        Ok(share_classifier(c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn ctx<'a>(gt: Option<&'a LabelMask>, region: Region) -> SliceContext<'a> {
        SliceContext {
            case_id: "patient001",
            phase: Phase::Ed,
            slice_index: 2,
            source_dims: (16, 16),
            region,
            ground_truth: gt,
        }
    }

    fn disk_labels() -> LabelMask {
        LabelMask::new(Grid2D::from_fn(16, 16, |x, y| {
            let d = (x as f64 - 8.0).powi(2) + (y as f64 - 8.0).powi(2);
            if d <= 9.0 {
                3.0
            } else if d <= 25.0 {
                2.0
            } else {
                0.0
            }
        }))
        .unwrap()
    }

    #[test]
    fn parse_specs() {
        assert_eq!("oracle".parse::<BackendSpec>().unwrap(), BackendSpec::Oracle);
        assert_eq!("noisy:2".parse::<BackendSpec>().unwrap(), BackendSpec::Noisy(2));
        assert_eq!("constant:0".parse::<BackendSpec>().unwrap(), BackendSpec::Constant(0.0));
        assert_eq!(
            "model:/tmp/x.onnx".parse::<BackendSpec>().unwrap(),
            BackendSpec::Model("/tmp/x.onnx".into())
        );
        for bad in ["", "noisy", "noisy:-1", "constant:2", "oracle:1", "model:", "wat"] {
            assert!(bad.parse::<BackendSpec>().is_err(), "{bad}");
        }
        let s = BackendSpec::Noisy(3);
        assert_eq!(s.to_string().parse::<BackendSpec>().unwrap(), s);
    }

    #[test]
    fn oracle_reproduces_ground_truth_at_identity() {
        let gt = disk_labels();
        let oracle = OraclePredictor::new(Structure::Lv);
        let out = oracle
            .predict(&Grid2D::zeros(16, 16), &ctx(Some(&gt), Region::full(16, 16)))
            .unwrap();
        assert_eq!(&out, gt.structure(Structure::Lv).grid());
    }

    #[test]
    fn oracle_requires_ground_truth() {
        let oracle = OraclePredictor::new(Structure::Lv);
        let err = oracle
            .predict(&Grid2D::zeros(16, 16), &ctx(None, Region::full(16, 16)))
            .unwrap_err();
        assert!(matches!(err, BackendError::MissingGroundTruth { .. }));
    }

    #[test]
    fn noisy_is_deterministic_and_morphological() {
        let gt = disk_labels();
        let base = gt.structure(Structure::Myo);
        let c = ctx(Some(&gt), Region::full(16, 16));
        let a = NoisyOracle::new(Structure::Myo, 1, 7).predict(&Grid2D::zeros(16, 16), &c).unwrap();
        let b = NoisyOracle::new(Structure::Myo, 1, 7).predict(&Grid2D::zeros(16, 16), &c).unwrap();
        assert_eq!(a, b);
        let er = erode(&base, 1).into_grid();
        let di = dilate(&base, 1).into_grid();
        assert!(a == er || a == di);
        let zero = NoisyOracle::new(Structure::Myo, 0, 7).predict(&Grid2D::zeros(16, 16), &c).unwrap();
        assert_eq!(&zero, base.grid());
    }

    #[test]
    fn noisy_flips_both_ways_across_views() {
        let gt = disk_labels();
        let base = gt.structure(Structure::Lv).count();
        let mut grew = false;
        let mut shrank = false;
        for seed in 0..32 {
            let c = ctx(Some(&gt), Region::full(16, 16));
            let out = NoisyOracle::new(Structure::Lv, 1, seed).predict(&Grid2D::zeros(16, 16), &c).unwrap();
            let n = out.data().iter().filter(|&&v| v > 0.0).count();
            grew |= n > base;
            shrank |= n < base;
        }
        assert!(grew && shrank);
    }

    #[test]
    fn model_kind_without_runtime() {
        #[cfg(not(feature = "onnx"))]
        {
            let spec: BackendSpec = "model:missing.onnx".parse().unwrap();
            assert!(matches!(
                spec.build_predictor(Structure::Lv, (224, 224), 0),
                Err(BackendError::RuntimeUnavailable(_))
            ));
        }
    }

    #[test]
    fn table_classifier_reads_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c1.csv");
        std::fs::write(&path, "case_id,score\npatient001, 0.8\npatient002,0.1\n").unwrap();
        let t = TableClassifier::from_csv(&path).unwrap();
        let input = ClassifierInput::zeros(1, 2, 2);
        let cx = |id| ClassifyContext { case_id: id, truth: None };
        assert_eq!(t.score(&input, &cx("patient001")).unwrap(), 0.8);
        assert!(matches!(
            t.score(&input, &cx("patient003")),
            Err(BackendError::MissingScore { .. })
        ));
    }

    struct Exclusive {
        active: Arc<AtomicUsize>,
        max_seen: Arc<AtomicUsize>,
    }

    impl SlicePredictor for Exclusive {
        fn name(&self) -> &str {
            "exclusive"
        }
        fn predict(&self, image: &Grid2D, _ctx: &SliceContext<'_>) -> Result<Grid2D> {
            let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
            self.max_seen.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(2));
            self.active.fetch_sub(1, Ordering::SeqCst);
            Ok(Grid2D::zeros(image.width(), image.height()))
        }
        fn concurrent(&self) -> bool {
            false
        }
    }

    #[test]
    fn single_threaded_backends_are_serialized() {
        let max_seen = Arc::new(AtomicUsize::new(0));
        let p = share_predictor(Box::new(Exclusive {
            active: Arc::new(AtomicUsize::new(0)),
            max_seen: max_seen.clone(),
        }));
        let img = Grid2D::zeros(4, 4);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for _ in 0..5 {
                        p.predict(&img, &ctx(None, Region::full(4, 4))).unwrap();
                    }
                });
            }
        });
        assert_eq!(max_seen.load(Ordering::SeqCst), 1);
    }
}
