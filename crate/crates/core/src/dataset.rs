//! ACDC-layout case records, loading and the synthetic phantom generator.
//!
//! Layout, per patient directory:
//!
//! ```text
//! patient001/
//!   Info.cfg                    ED: 1 / ES: 12 / Group: DCM / Height / Weight / NbFrame
//!   patient001_frame01.nii.gz   ED intensity volume
//!   patient001_frame01_gt.nii.gz
//!   patient001_frame12.nii.gz   ES intensity volume
//!   patient001_frame12_gt.nii.gz
//!   patient001_4d.nii.gz        optional cine, used when a frame file is absent
//! ```
//!
//! A root containing `training/` and/or `testing/` uses those as the split;
//! a flat root of patient directories is treated as all-test.

use crate::cascade::PathologyClass;
use crate::grid::{Grid2D, Volume3D};
use crate::mask::{LabelMask, MaskError};
use crate::nifti::{self, Datatype, NiftiError, NiftiVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "ED")]
    Ed,
    #[serde(rename = "ES")]
    Es,
}

impl Phase {
    pub const ALL: [Phase; 2] = [Phase::Ed, Phase::Es];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Ed => "ED",
            Phase::Es => "ES",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("dataset root {0} contains no patient directories")]
    Empty(PathBuf),
    #[error("{patient}: cannot read {path}: {source}")]
    Io {
        patient: String,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{patient}: metadata is missing key `{key}`")]
    MissingKey { patient: String, key: &'static str },
    #[error("{patient}: metadata key `{key}` has unparseable value `{value}`")]
    BadValue {
        patient: String,
        key: &'static str,
        value: String,
    },
    #[error("{patient}: group `{group}` is not one of NOR, RV, HCM, MINF, DCM")]
    UnknownGroup { patient: String, group: String },
    #[error("{patient}: ED and ES both point at frame {frame}")]
    SameFrame { patient: String, frame: usize },
    #[error("{patient}: no image for frame {frame} (looked for {tried})")]
    MissingFrame {
        patient: String,
        frame: usize,
        tried: String,
    },
    #[error("{patient}: {path}: {source}")]
    Nifti {
        patient: String,
        path: PathBuf,
        #[source]
        source: NiftiError,
    },
    #[error("{patient}: {path}: {source}")]
    Labels {
        patient: String,
        path: PathBuf,
        #[source]
        source: MaskError,
    },
    #[error("{patient}: {what} dims {got:?} differ from {expected:?}")]
    Dims {
        patient: String,
        what: String,
        got: (usize, usize, usize),
        expected: (usize, usize, usize),
    },
}

impl DatasetError {
    /// Patient directory the error belongs to, if any.
    pub fn patient(&self) -> Option<&str> {
        use DatasetError::*;
        match self {
            MissingRoot(_) | Empty(_) => None,
            Io { patient, .. }
            | MissingKey { patient, .. }
            | BadValue { patient, .. }
            | UnknownGroup { patient, .. }
            | SameFrame { patient, .. }
            | MissingFrame { patient, .. }
            | Nifti { patient, .. }
            | Labels { patient, .. }
            | Dims { patient, .. } => Some(patient),
        }
    }
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One patient.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    pub group: PathologyClass,
    /// 1-based cine frame indices.
    pub ed_frame: usize,
    pub es_frame: usize,
    pub nb_frames: usize,
    pub ed_volume: Volume3D,
    pub es_volume: Volume3D,
    pub ed_gt: Option<Vec<LabelMask>>,
    pub es_gt: Option<Vec<LabelMask>>,
    pub height_cm: f64,
    pub weight_kg: f64,
}

impl CaseRecord {
    pub fn new(
        id: impl Into<String>,
        group: PathologyClass,
        ed_frame: usize,
        es_frame: usize,
        ed_volume: Volume3D,
        es_volume: Volume3D,
    ) -> Self {
        Self {
            id: id.into(),
            group,
            ed_frame,
            es_frame,
            nb_frames: ed_frame.max(es_frame),
            ed_volume,
            es_volume,
            ed_gt: None,
            es_gt: None,
            height_cm: 0.0,
            weight_kg: 0.0,
        }
    }

    pub fn volume(&self, phase: Phase) -> &Volume3D {
        match phase {
            Phase::Ed => &self.ed_volume,
            Phase::Es => &self.es_volume,
        }
    }

    pub fn ground_truth(&self, phase: Phase) -> Option<&[LabelMask]> {
        match phase {
            Phase::Ed => self.ed_gt.as_deref(),
            Phase::Es => self.es_gt.as_deref(),
        }
    }

    pub fn frame(&self, phase: Phase) -> usize {
        match phase {
            Phase::Ed => self.ed_frame,
            Phase::Es => self.es_frame,
        }
    }

    pub fn has_ground_truth(&self) -> bool {
        self.ed_gt.is_some() && self.es_gt.is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub cases: Vec<CaseRecord>,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn case(&self, id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.id == id)
    }

    pub fn test_cases(&self) -> impl Iterator<Item = &CaseRecord> {
        self.split.test.iter().filter_map(|id| self.case(id))
    }

    pub fn train_cases(&self) -> impl Iterator<Item = &CaseRecord> {
        self.split.train.iter().filter_map(|id| self.case(id))
    }
}

/// Everything found under a root: loaded cases plus a named failure for
/// every patient directory that could not be loaded.
#[derive(Debug)]
pub struct DatasetScan {
    pub dataset: Dataset,
    pub failures: Vec<DatasetError>,
}

/// Parsed `Info.cfg`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseInfo {
    pub ed: usize,
    pub es: usize,
    pub group: PathologyClass,
    pub height_cm: f64,
    pub weight_kg: f64,
    pub nb_frames: usize,
}

/// Parses `Key: value` lines. Unknown keys are ignored.
pub fn parse_info(patient: &str, text: &str) -> Result<CaseInfo> {
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once(':') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |key: &'static str| {
        kv.get(key).ok_or(DatasetError::MissingKey {
            patient: patient.to_string(),
            key,
        })
    };
    let bad = |key: &'static str, value: &str| DatasetError::BadValue {
        patient: patient.to_string(),
        key,
        value: value.to_string(),
    };
    let int = |key: &'static str| -> Result<usize> {
        let v = get(key)?;
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(bad(key, v)),
        }
    };
    let float = |key: &'static str| -> Result<f64> {
        let v = get(key)?;
        v.parse::<f64>().map_err(|_| bad(key, v))
    };
    let ed = int("ED")?;
    let es = int("ES")?;
    let group_str = get("Group")?;
    let group = group_str
        .parse::<PathologyClass>()
        .map_err(|_| DatasetError::UnknownGroup {
            patient: patient.to_string(),
            group: group_str.clone(),
        })?;
    let info = CaseInfo {
        ed,
        es,
        group,
        height_cm: float("Height")?,
        weight_kg: float("Weight")?,
        nb_frames: int("NbFrame")?,
    };
    if info.ed == info.es {
        return Err(DatasetError::SameFrame {
            patient: patient.to_string(),
            frame: info.ed,
        });
    }
    Ok(info)
}

pub fn format_info(info: &CaseInfo) -> String {
    format!(
        "ED: {}\nES: {}\nGroup: {}\nHeight: {:.1}\nNbFrame: {}\nWeight: {:.1}\n",
        info.ed,
        info.es,
        info.group.acdc_group(),
        info.height_cm,
        info.nb_frames,
        info.weight_kg
    )
}

fn existing(dir: &Path, stem: &str) -> Option<PathBuf> {
    [".nii.gz", ".nii"]
        .iter()
        .map(|ext| dir.join(format!("{stem}{ext}")))
        .find(|p| p.is_file())
}

fn read_nifti_file(patient: &str, path: &Path) -> Result<NiftiVolume> {
    nifti::read_file(path).map_err(|source| DatasetError::Nifti {
        patient: patient.to_string(),
        path: path.to_path_buf(),
        source,
    })
}

fn labels_from_volume(patient: &str, path: &Path, vol: &Volume3D) -> Result<Vec<LabelMask>> {
    vol.iter_slices()
        .map(|s| {
            LabelMask::new(s).map_err(|source| DatasetError::Labels {
                patient: patient.to_string(),
                path: path.to_path_buf(),
                source,
            })
        })
        .collect()
}

/// Loads a single patient directory.
pub fn load_case(dir: &Path) -> Result<CaseRecord> {
    let patient = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let cfg = dir.join("Info.cfg");
    let text = std::fs::read_to_string(&cfg).map_err(|source| DatasetError::Io {
        patient: patient.clone(),
        path: cfg.clone(),
        source,
    })?;
    let info = parse_info(&patient, &text)?;

    let mut cine: Option<NiftiVolume> = None;
    let mut frame_volume = |frame: usize| -> Result<Volume3D> {
        let stem = format!("{patient}_frame{frame:02}");
        if let Some(path) = existing(dir, &stem) {
            return Ok(read_nifti_file(&patient, &path)?.into_volume());
        }
        if cine.is_none() {
            if let Some(path) = existing(dir, &format!("{patient}_4d")) {
                cine = Some(read_nifti_file(&patient, &path)?);
            }
        }
        cine.as_ref()
            .and_then(|c| c.frame(frame - 1).cloned())
            .ok_or_else(|| DatasetError::MissingFrame {
                patient: patient.clone(),
                frame,
                tried: format!("{stem}.nii[.gz], {patient}_4d.nii[.gz]"),
            })
    };
    let ed_volume = frame_volume(info.ed)?;
    let es_volume = frame_volume(info.es)?;

    let gt = |frame: usize, image: &Volume3D| -> Result<Option<Vec<LabelMask>>> {
        let Some(path) = existing(dir, &format!("{patient}_frame{frame:02}_gt")) else {
            return Ok(None);
        };
        let vol = read_nifti_file(&patient, &path)?.into_volume();
        if vol.dims() != image.dims() {
            return Err(DatasetError::Dims {
                patient: patient.clone(),
                what: format!("ground truth for frame {frame}"),
                got: vol.dims(),
                expected: image.dims(),
            });
        }
        labels_from_volume(&patient, &path, &vol).map(Some)
    };
    let ed_gt = gt(info.ed, &ed_volume)?;
    let es_gt = gt(info.es, &es_volume)?;

    Ok(CaseRecord {
        id: patient,
        group: info.group,
        ed_frame: info.ed,
        es_frame: info.es,
        nb_frames: info.nb_frames,
        ed_volume,
        es_volume,
        ed_gt,
        es_gt,
        height_cm: info.height_cm,
        weight_kg: info.weight_kg,
    })
}

fn patient_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|source| DatasetError::Io {
        patient: String::new(),
        path: dir.to_path_buf(),
        source,
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Loads every patient directory, collecting failures instead of stopping.
pub fn scan_dataset(root: &Path) -> Result<DatasetScan> {
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    let training = root.join("training");
    let testing = root.join("testing");
    let groups: Vec<(bool, PathBuf)> = if training.is_dir() || testing.is_dir() {
        [(false, training), (true, testing)]
            .into_iter()
            .filter(|(_, p)| p.is_dir())
            .collect()
    } else {
        vec![(true, root.to_path_buf())]
    };

    let mut jobs = Vec::new();
    for (is_test, dir) in &groups {
        for p in patient_dirs(dir)? {
            jobs.push((*is_test, p));
        }
    }
    if jobs.is_empty() {
        return Err(DatasetError::Empty(root.to_path_buf()));
    }

    use rayon::prelude::*;
    let loaded: Vec<(bool, Result<CaseRecord>)> = jobs
        .par_iter()
        .map(|(is_test, p)| (*is_test, load_case(p)))
        .collect();

    let mut cases = Vec::new();
    let mut split = DatasetSplit::default();
    let mut failures = Vec::new();
    for (is_test, r) in loaded {
        match r {
            Ok(case) => {
                if is_test {
                    split.test.push(case.id.clone());
                } else {
                    split.train.push(case.id.clone());
                }
                cases.push(case);
            }
            Err(e) => failures.push(e),
        }
    }
    Ok(DatasetScan {
        dataset: Dataset { cases, split },
        failures,
    })
}

/// Loads a dataset, failing on the first patient that cannot be read.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mut scan = scan_dataset(root)?;
    if !scan.failures.is_empty() {
        return Err(scan.failures.swap_remove(0));
    }
    Ok(scan.dataset)
}

/// Writes one case in the ACDC layout under `dir/<id>/`. With `cine`, a 4-D
/// file of `nb_frames` frames (linear ED to ES blend) is written and the
/// per-frame intensity files are omitted.
pub fn write_case(dir: &Path, case: &CaseRecord, cine: bool) -> std::io::Result<PathBuf> {
    let pdir = dir.join(&case.id);
    std::fs::create_dir_all(&pdir)?;
    let info = CaseInfo {
        ed: case.ed_frame,
        es: case.es_frame,
        group: case.group,
        height_cm: case.height_cm,
        weight_kg: case.weight_kg,
        nb_frames: case.nb_frames,
    };
    std::fs::write(pdir.join("Info.cfg"), format_info(&info))?;
    let io = |e: NiftiError| std::io::Error::new(std::io::ErrorKind::Other, e.to_string());
    for phase in Phase::ALL {
        let frame = case.frame(phase);
        let stem = format!("{}_frame{frame:02}", case.id);
        if !cine {
            let nv = NiftiVolume::from_volume(case.volume(phase).clone(), Datatype::Int16);
            nifti::write_file(&pdir.join(format!("{stem}.nii.gz")), &nv).map_err(io)?;
        }
        if let Some(gt) = case.ground_truth(phase) {
            let grids: Vec<Grid2D> = gt.iter().map(|m| m.grid().clone()).collect();
            let vol = Volume3D::from_slices(&grids, case.volume(phase).spacing().2)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
            let nv = NiftiVolume::from_volume(vol, Datatype::Uint8);
            nifti::write_file(&pdir.join(format!("{stem}_gt.nii.gz")), &nv).map_err(io)?;
        }
    }
    if cine {
        let (ed, es) = (case.ed_frame as f64, case.es_frame as f64);
        let frames = (1..=case.nb_frames)
            .map(|t| {
                let a = ((t as f64 - ed) / (es - ed)).clamp(0.0, 1.0);
                let data = case
                    .ed_volume
                    .data()
                    .iter()
                    .zip(case.es_volume.data())
                    .map(|(x, y)| {
                        if t == case.ed_frame {
                            *x
                        } else if t == case.es_frame {
                            *y
                        } else {
                            (x * (1.0 - a) + y * a).round()
                        }
                    })
                    .collect();
                let (w, h, s) = case.ed_volume.dims();
                Volume3D::new(w, h, s, data, case.ed_volume.spacing()).expect("same dims")
            })
            .collect();
        let nv = NiftiVolume::from_frames(frames, Datatype::Int16);
        nifti::write_file(&pdir.join(format!("{}_4d.nii.gz", case.id)), &nv).map_err(io)?;
    }
    Ok(pdir)
}

/// Slice geometry of generated phantoms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomDims {
    pub width: usize,
    pub height: usize,
    pub slices: usize,
}

impl Default for PhantomDims {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            slices: 6,
        }
    }
}

/// Basal-slice geometry of one phase, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseGeometry {
    pub center: (f64, f64),
    pub lv_radius: f64,
    pub myo_thickness: f64,
    pub rv_radius: f64,
    pub rv_offset: f64,
    /// Angular sector `(start, width)` in radians with a thinned wall.
    pub infarct: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomGeometry {
    pub ed: PhaseGeometry,
    pub es: PhaseGeometry,
}

/// Relative wall-thickness band (fraction of the short image side) of NOR
/// phantoms at end-diastole.
pub const NORMAL_THICKNESS_BAND: (f64, f64) = (0.045 * 0.92, 0.045 * 1.08);

const JITTER: f64 = 0.08;

fn class_salt(class: PathologyClass) -> u64 {
    0xA5A5_0000 + class.index() as u64
}

fn phantom_rng(seed: u64, class: PathologyClass) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ class_salt(class))
}

/// Deterministic geometry for `(seed, class, dims)`.
pub fn phantom_geometry(seed: u64, class: PathologyClass, dims: PhantomDims) -> PhantomGeometry {
    let mut rng = phantom_rng(seed, class);
    let side = dims.width.min(dims.height) as f64;
    let mut j = |x: f64| x * (1.0 + rng.gen_range(-JITTER..=JITTER));

    // (lv radius, thickness, rv radius, rv offset) per class, ED, as fractions of `side`.
    let (lv, t, rv, off) = match class {
        PathologyClass::Nor => (0.13, 0.045, 0.17, 0.16),
        PathologyClass::Hcm => (0.11, 0.085, 0.17, 0.17),
        PathologyClass::Dcm => (0.19, 0.036, 0.17, 0.21),
        PathologyClass::Minf => (0.165, 0.045, 0.17, 0.19),
        PathologyClass::Arv => (0.13, 0.045, 0.23, 0.20),
    };
    // ES contraction of LV radius, wall thickening and RV radius.
    let (lv_es, t_es, rv_es) = match class {
        PathologyClass::Nor | PathologyClass::Hcm => (0.65, 1.3, 0.75),
        PathologyClass::Arv => (0.65, 1.3, 0.9),
        PathologyClass::Dcm => (0.9, 1.05, 0.8),
        PathologyClass::Minf => (0.85, 1.1, 0.8),
    };
    let ed = PhaseGeometry {
        center: (
            dims.width as f64 * 0.5 + j(0.03 * side) * if seed % 2 == 0 { 1.0 } else { -1.0 },
            dims.height as f64 * 0.5 + j(0.02 * side),
        ),
        lv_radius: j(lv * side),
        myo_thickness: j(t * side),
        rv_radius: j(rv * side),
        rv_offset: j(off * side),
        infarct: None,
    };
    let infarct = (class == PathologyClass::Minf).then(|| (j(PI / 3.0), j(1.2)));
    let ed = PhaseGeometry { infarct, ..ed };
    let es = PhaseGeometry {
        lv_radius: ed.lv_radius * lv_es,
        myo_thickness: ed.myo_thickness * t_es,
        rv_radius: ed.rv_radius * rv_es,
        rv_offset: ed.rv_offset * (0.5 + 0.5 * lv_es),
        ..ed
    };
    PhantomGeometry { ed, es }
}

fn in_sector(angle: f64, (start, width): (f64, f64)) -> bool {
    let rel = (angle - start).rem_euclid(2.0 * PI);
    rel <= width
}

/// Label map for one slice; `taper` in (0, 1] shrinks toward the apex.
fn phantom_labels(g: &PhaseGeometry, dims: PhantomDims, taper: f64) -> LabelMask {
    let r_lv = g.lv_radius * taper;
    let thick = g.myo_thickness * (0.8 + 0.2 * taper);
    let rv_r = g.rv_radius * taper * taper;
    let (cx, cy) = g.center;
    let rv_cx = cx - g.rv_offset * (0.6 + 0.4 * taper);
    let grid = Grid2D::from_fn(dims.width, dims.height, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (dx, dy) = (px - cx, py - cy);
        let d = dx.hypot(dy);
        let mut wall = thick;
        if let Some(sector) = g.infarct {
            if in_sector(dy.atan2(dx), sector) {
                wall *= 0.5;
            }
        }
        if d <= r_lv {
            3.0
        } else if d <= r_lv + wall {
            2.0
        } else if rv_r > 1.0
            && (px - rv_cx).hypot(py - cy) <= rv_r
            && d > r_lv + thick + 1.5
            && px < cx
        {
            1.0
        } else {
            0.0
        }
    });
    LabelMask::new(grid).expect("phantom labels are 0..=3")
}

fn slice_taper(k: usize, n: usize) -> f64 {
    if n <= 1 {
        1.0
    } else {
        1.0 - 0.5 * (k as f64 / (n - 1) as f64).powf(1.5)
    }
}

/// Intensity rendering of a label slice: bright blood pools, darker wall,
/// textured background and seeded noise, rounded to whole numbers.
fn render(labels: &LabelMask, rng: &mut ChaCha8Rng, phase_shift: f64) -> Grid2D {
    let (w, h) = labels.dims();
    let (fx, fy) = (rng.gen_range(2.0..5.0), rng.gen_range(2.0..5.0));
    Grid2D::from_fn(w, h, |x, y| {
        let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
        let base = match labels.label(x, y) {
            1 | 3 => 0.85,
            2 => 0.35,
            _ => 0.15 + 0.06 * ((fx * PI * u + phase_shift).sin() * (fy * PI * v).cos()),
        };
        let noise: f64 = rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0);
        ((base + 0.025 * noise).clamp(0.0, 1.2) * 1000.0).round()
    })
}

/// Synthetic short-axis case: concentric LV cavity and myocardium with a
/// crescent RV, shaped by class. Same arguments give an identical record.
pub fn make_phantom(seed: u64, class: PathologyClass, dims: PhantomDims) -> CaseRecord {
    let geo = phantom_geometry(seed, class, dims);
    let mut rng = phantom_rng(seed ^ 0x5EED, class);
    let spacing = (1.5, 1.5, 10.0);
    let mut build = |g: &PhaseGeometry, shift: f64| {
        let labels: Vec<LabelMask> = (0..dims.slices)
            .map(|k| phantom_labels(g, dims, slice_taper(k, dims.slices)))
            .collect();
        let images: Vec<Grid2D> = labels
            .iter()
            .map(|l| {
                render(l, &mut rng, shift)
                    .with_spacing((spacing.0, spacing.1))
                    .expect("positive spacing")
            })
            .collect();
        let labels = labels
            .into_iter()
            .map(|l| LabelMask::new(l.into_grid().with_spacing((spacing.0, spacing.1)).unwrap()).unwrap())
            .collect::<Vec<_>>();
        (Volume3D::from_slices(&images, spacing.2).expect("equal slices"), labels)
    };
    let (ed_volume, ed_gt) = build(&geo.ed, 0.0);
    let (es_volume, es_gt) = build(&geo.es, 0.7);
    let nb_frames = 20 + (seed % 11) as usize;
    let es_frame = 8 + (seed % 6) as usize;
    let mut meta = phantom_rng(seed ^ 0xBEEF, class);
    CaseRecord {
        id: format!("phantom_{}_{seed:04}", class.name().to_ascii_lowercase()),
        group: class,
        ed_frame: 1,
        es_frame,
        nb_frames,
        ed_volume,
        es_volume,
        ed_gt: Some(ed_gt),
        es_gt: Some(es_gt),
        height_cm: (meta.gen_range(150.0..195.0f64) * 10.0).round() / 10.0,
        weight_kg: (meta.gen_range(50.0..110.0f64) * 10.0).round() / 10.0,
    }
}

/// Class order of the ACDC training and testing blocks.
pub const ACDC_BLOCK_ORDER: [PathologyClass; 5] = [
    PathologyClass::Dcm,
    PathologyClass::Hcm,
    PathologyClass::Minf,
    PathologyClass::Nor,
    PathologyClass::Arv,
];

/// Composition of a generated phantom tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSetSpec {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dims: PhantomDims,
    pub seed: u64,
}

impl Default for PhantomSetSpec {
    /// The full 150-patient ACDC composition.
    fn default() -> Self {
        Self {
            train_per_class: 20,
            test_per_class: 10,
            dims: PhantomDims::default(),
            seed: 0,
        }
    }
}

/// Generates phantom cases named `patientNNN` in ACDC order and split.
pub fn phantom_cases(spec: &PhantomSetSpec) -> (Vec<CaseRecord>, DatasetSplit) {
    let mut cases = Vec::new();
    let mut split = DatasetSplit::default();
    let mut n = 0u64;
    for (per_class, is_test) in [(spec.train_per_class, false), (spec.test_per_class, true)] {
        for class in ACDC_BLOCK_ORDER {
            for _ in 0..per_class {
                n += 1;
                let mut case = make_phantom(spec.seed.wrapping_add(n), class, spec.dims);
                case.id = format!("patient{n:03}");
                if is_test {
                    split.test.push(case.id.clone());
                } else {
                    split.train.push(case.id.clone());
                }
                cases.push(case);
            }
        }
    }
    (cases, split)
}

/// Writes a phantom tree with `training/` and `testing/` subdirectories.
pub fn write_phantom_dataset(root: &Path, spec: &PhantomSetSpec) -> std::io::Result<DatasetSplit> {
    let (cases, split) = phantom_cases(spec);
    use rayon::prelude::*;
    cases.par_iter().try_for_each(|case| {
        let sub = if split.test.contains(&case.id) {
            "testing"
        } else {
            "training"
        };
        write_case(&root.join(sub), case, false).map(|_| ())
    })?;
    Ok(split)
}
