//! Classifier-input composition and the four-stage binary cascade.
//!
//! ```text
//!            c1: LV pathology?
//!           /                 \
//!       no /                   \ yes
//!   c2: ARV?                 c3: HCM?
//!    /     \                  /      \
//!  NOR     ARV              HCM    c4: MINF?
//!                                   /     \
//!                                 DCM     MINF
//! ```

use crate::backend::{BackendError, BinaryClassifier, ClassifyContext};
use crate::dataset::{CaseRecord, Phase};
use crate::grid::{resize, Grid2D, ResizeMode};
use crate::mask::{LabelMask, Structure};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PathologyClass {
    #[serde(rename = "NOR")]
    Nor,
    #[serde(rename = "ARV")]
    Arv,
    #[serde(rename = "HCM")]
    Hcm,
    #[serde(rename = "MINF")]
    Minf,
    #[serde(rename = "DCM")]
    Dcm,
}

impl PathologyClass {
    pub const ALL: [PathologyClass; 5] = [
        PathologyClass::Nor,
        PathologyClass::Arv,
        PathologyClass::Hcm,
        PathologyClass::Minf,
        PathologyClass::Dcm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PathologyClass::Nor => "NOR",
            PathologyClass::Arv => "ARV",
            PathologyClass::Hcm => "HCM",
            PathologyClass::Minf => "MINF",
            PathologyClass::Dcm => "DCM",
        }
    }

    /// Group string as written in ACDC metadata (`RV` for the ARV group).
    pub fn acdc_group(self) -> &'static str {
        match self {
            PathologyClass::Arv => "RV",
            other => other.name(),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PathologyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PathologyClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NOR" => Ok(PathologyClass::Nor),
            "RV" | "ARV" => Ok(PathologyClass::Arv),
            "HCM" => Ok(PathologyClass::Hcm),
            "MINF" => Ok(PathologyClass::Minf),
            "DCM" => Ok(PathologyClass::Dcm),
            other => Err(format!("unknown pathology group `{other}`")),
        }
    }
}

/// One binary decision of the cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    /// c1: {HCM, MINF, DCM} (positive) vs {NOR, ARV}.
    LvPathology,
    /// c2: ARV (positive) vs NOR.
    RvAbnormal,
    /// c3: HCM (positive) vs {MINF, DCM}.
    Hypertrophy,
    /// c4: MINF (positive) vs DCM.
    Infarction,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::LvPathology,
        Stage::RvAbnormal,
        Stage::Hypertrophy,
        Stage::Infarction,
    ];

    /// 1-based classifier number.
    pub fn number(self) -> u8 {
        self as u8 + 1
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Classes this stage is trained and evaluated on.
    pub fn domain(self) -> &'static [PathologyClass] {
        use PathologyClass::*;
        match self {
            Stage::LvPathology => &[Nor, Arv, Hcm, Minf, Dcm],
            Stage::RvAbnormal => &[Nor, Arv],
            Stage::Hypertrophy => &[Hcm, Minf, Dcm],
            Stage::Infarction => &[Minf, Dcm],
        }
    }

    pub fn is_positive(self, class: PathologyClass) -> bool {
        use PathologyClass::*;
        match self {
            Stage::LvPathology => matches!(class, Hcm | Minf | Dcm),
            Stage::RvAbnormal => class == Arv,
            Stage::Hypertrophy => class == Hcm,
            Stage::Infarction => class == Minf,
        }
    }

    pub fn applies_to(self, class: PathologyClass) -> bool {
        self.domain().contains(&class)
    }

    /// `(negative, positive)` group labels as reported in metrics tables.
    pub fn labels(self) -> [&'static str; 2] {
        match self {
            Stage::LvPathology => ["NOR+ARV", "MINF+HCM+DCM"],
            Stage::RvAbnormal => ["NOR", "ARV"],
            Stage::Hypertrophy => ["MINF+DCM", "HCM"],
            Stage::Infarction => ["DCM", "MINF"],
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CascadeError {
    #[error("case {case_id}: no {phase} segmentation masks supplied")]
    MissingPhase { case_id: String, phase: Phase },
    #[error("case {case_id}: {phase} has {masks} masks for {slices} slices")]
    SliceCountMismatch {
        case_id: String,
        phase: Phase,
        masks: usize,
        slices: usize,
    },
    #[error("case {case_id}: {phase} mask dims {mask:?} differ from image dims {image:?}")]
    MaskDims {
        case_id: String,
        phase: Phase,
        mask: (usize, usize),
        image: (usize, usize),
    },
    #[error("classifier {} failed: {source}", stage.number())]
    Backend {
        stage: Stage,
        #[source]
        source: BackendError,
    },
    #[error("classifier {} returned score {score} outside [0, 1]", stage.number())]
    ScoreOutOfRange { stage: Stage, score: f64 },
}

/// Composition parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComposeConfig {
    /// Short-axis slices sampled per phase.
    pub slices: usize,
    /// Square output plane size.
    pub size: usize,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        Self { slices: 3, size: 128 }
    }
}

/// `slices x phases(ED, ES) x channels(RV, MYO, LV) x H x W`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierInput {
    slices: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ClassifierInput {
    pub const PHASES: usize = 2;
    pub const CHANNELS: usize = 3;

    pub fn zeros(slices: usize, height: usize, width: usize) -> Self {
        Self {
            slices,
            height,
            width,
            data: vec![0.0; slices * Self::PHASES * Self::CHANNELS * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 5] {
        [self.slices, Self::PHASES, Self::CHANNELS, self.height, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn plane_offset(&self, slice: usize, phase: Phase, channel: usize) -> usize {
        ((slice * Self::PHASES + phase.index()) * Self::CHANNELS + channel) * self.height * self.width
    }

    /// One `H x W` channel plane.
    pub fn plane(&self, slice: usize, phase: Phase, structure: Structure) -> &[f64] {
        let at = self.plane_offset(slice, phase, structure.index());
        &self.data[at..at + self.height * self.width]
    }

    fn set_plane(&mut self, slice: usize, phase: Phase, structure: Structure, plane: &Grid2D) {
        let at = self.plane_offset(slice, phase, structure.index());
        self.data[at..at + self.height * self.width].copy_from_slice(plane.data());
    }
}

/// Segmentation masks per phase, one per short-axis slice.
#[derive(Debug, Clone, Default)]
pub struct PhaseMasks {
    pub ed: Option<Vec<LabelMask>>,
    pub es: Option<Vec<LabelMask>>,
}

impl PhaseMasks {
    pub fn get(&self, phase: Phase) -> Option<&[LabelMask]> {
        match phase {
            Phase::Ed => self.ed.as_deref(),
            Phase::Es => self.es.as_deref(),
        }
    }
}

/// Evenly spaced slice indices over `n` slices (repeats when `n < k`).
pub fn select_slices(n: usize, k: usize) -> Vec<usize> {
    match (n, k) {
        (0, _) | (_, 0) => Vec::new(),
        (_, 1) => vec![n / 2],
        _ => (0..k)
            .map(|i| ((i * (n - 1)) as f64 / (k - 1) as f64).round() as usize)
            .collect(),
    }
}

/// Per-slice min-max normalization. A flat slice maps to its value clamped
/// into [0, 1].
fn normalize(img: &Grid2D) -> Grid2D {
    let (lo, hi) = img.min_max();
    if hi > lo {
        img.map(|v| (v - lo) / (hi - lo))
    } else {
        img.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Builds the classifier tensor: for each sampled slice and phase, the
/// normalized intensity masked by each structure, resized bilinearly to
/// `size x size`.
pub fn compose_input(
    case: &CaseRecord,
    masks: &PhaseMasks,
    cfg: &ComposeConfig,
) -> Result<ClassifierInput, CascadeError> {
    let n = case.ed_volume.slices().min(case.es_volume.slices());
    let picks = select_slices(n, cfg.slices);
    let mut out = ClassifierInput::zeros(picks.len(), cfg.size, cfg.size);
    for phase in Phase::ALL {
        let volume = case.volume(phase);
        let phase_masks = masks.get(phase).ok_or_else(|| CascadeError::MissingPhase {
            case_id: case.id.clone(),
            phase,
        })?;
        if phase_masks.len() != volume.slices() {
            return Err(CascadeError::SliceCountMismatch {
                case_id: case.id.clone(),
                phase,
                masks: phase_masks.len(),
                slices: volume.slices(),
            });
        }
        for (k, &z) in picks.iter().enumerate() {
            let intensity = normalize(&volume.slice(z));
            let mask = &phase_masks[z];
            if mask.dims() != intensity.dims() {
                return Err(CascadeError::MaskDims {
                    case_id: case.id.clone(),
                    phase,
                    mask: mask.dims(),
                    image: intensity.dims(),
                });
            }
            for s in Structure::ALL {
                let code = s.code();
                let (w, h) = intensity.dims();
                let masked = Grid2D::from_fn(w, h, |x, y| {
                    if mask.label(x, y) == code {
                        intensity.get(x, y)
                    } else {
                        0.0
                    }
                });
                let plane = resize(&masked, cfg.size, cfg.size, ResizeMode::Bilinear);
                out.set_plane(k, phase, s, &plane);
            }
        }
    }
    Ok(out)
}

/// Decision thresholds per stage; `score >= threshold` takes the positive side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds(pub [f64; 4]);

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds([0.5; 4])
    }
}

impl Thresholds {
    pub fn get(&self, stage: Stage) -> f64 {
        self.0[stage.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub stage: Stage,
    pub score: f64,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    pub predicted: PathologyClass,
    pub trace: Vec<TraceStep>,
}

impl CascadeResult {
    /// 1-based numbers of the classifiers that ran, in order.
    pub fn classifiers_invoked(&self) -> Vec<u8> {
        self.trace.iter().map(|t| t.stage.number()).collect()
    }
}

/// The four stage classifiers, indexed by [`Stage::index`].
pub struct Cascade<'a> {
    pub classifiers: [&'a dyn BinaryClassifier; 4],
    pub thresholds: Thresholds,
}

impl<'a> Cascade<'a> {
    pub fn new(classifiers: [&'a dyn BinaryClassifier; 4], thresholds: Thresholds) -> Self {
        Self {
            classifiers,
            thresholds,
        }
    }

    /// Runs only the classifiers on the taken path.
    pub fn classify(
        &self,
        input: &ClassifierInput,
        ctx: &ClassifyContext<'_>,
    ) -> Result<CascadeResult, CascadeError> {
        let mut trace = Vec::with_capacity(3);
        let mut decide = |stage: Stage| -> Result<bool, CascadeError> {
            let score = self.classifiers[stage.index()]
                .score(input, ctx)
                .map_err(|source| CascadeError::Backend { stage, source })?;
            if !(0.0..=1.0).contains(&score) {
                return Err(CascadeError::ScoreOutOfRange { stage, score });
            }
            let positive = score >= self.thresholds.get(stage);
            trace.push(TraceStep {
                stage,
                score,
                positive,
            });
            Ok(positive)
        };
        let predicted = if decide(Stage::LvPathology)? {
            if decide(Stage::Hypertrophy)? {
                PathologyClass::Hcm
            } else if decide(Stage::Infarction)? {
                PathologyClass::Minf
            } else {
                PathologyClass::Dcm
            }
        } else if decide(Stage::RvAbnormal)? {
            PathologyClass::Arv
        } else {
            PathologyClass::Nor
        };
        Ok(CascadeResult { predicted, trace })
    }
}

/// Convenience wrapper around [`Cascade::classify`].
pub fn cascade_classify(
    input: &ClassifierInput,
    classifiers: [&dyn BinaryClassifier; 4],
    thresholds: Thresholds,
    ctx: &ClassifyContext<'_>,
) -> Result<CascadeResult, CascadeError> {
    Cascade::new(classifiers, thresholds).classify(input, ctx)
}
