//! Localize, segment and restore each cardiac structure of a slice.
//!
//! Per structure: the localizer sees the whole slice at model resolution and
//! its thresholded output gives a bounding box, which is mapped back to
//! native pixels and framed. The segmenter sees the framed crop at model
//! resolution; its probability map is restored to the crop size with
//! scale-aware Gaussian smoothing and pasted into a native-size canvas. The
//! three binary masks are then recomposed into a label map.
//!
//! [`PipelineMode`] selects reduced variants for ablation.

use crate::backend::{
    check_probability_map, share_predictor, BackendError, BackendSpec, SliceContext, SlicePredictor,
};
use crate::dataset::{CaseRecord, Phase};
use crate::grid::{resize, upscale_mask_smoothed_with, Grid2D, ResizeMode, SigmaModel};
use crate::mask::{bbox, decompose, frame_region, recompose, BinaryMask, LabelMask, Region, Structure};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    /// Side of the square model input.
    pub model_input_size: usize,
    /// Frame added around each localized box, as a fraction of its size.
    pub margin: f64,
    pub threshold: f64,
    /// Width over height the framed region is grown toward.
    pub aspect: f64,
    pub sigma_model: SigmaModel,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            model_input_size: 224,
            margin: 0.15,
            threshold: 0.5,
            aspect: 1.0,
            sigma_model: SigmaModel::default(),
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<(), SegError> {
        let bad = |m: String| Err(SegError::InvalidConfig(m));
        if self.model_input_size < 32 {
            return bad(format!("model_input_size {} is below 32", self.model_input_size));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} is outside (0, 1)", self.threshold));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin {} must be finite and non-negative", self.margin));
        }
        if !(self.aspect > 0.0 && self.aspect.is_finite()) {
            return bad(format!("aspect {} must be positive", self.aspect));
        }
        Ok(())
    }

    fn model_dims(&self) -> (usize, usize) {
        (self.model_input_size, self.model_input_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Step {
    Localize,
    Segment,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Step::Localize => "localize",
            Step::Segment => "segment",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SegError {
    #[error("invalid segmentation config: {0}")]
    InvalidConfig(String),
    #[error("{step} {structure}: {source}")]
    Backend {
        step: Step,
        structure: Structure,
        #[source]
        source: BackendError,
    },
    #[error("{case_id} {phase}: ground truth has {gt} slices, image has {image}")]
    SliceCount {
        case_id: String,
        phase: Phase,
        gt: usize,
        image: usize,
    },
    #[error("{case_id} {phase} slice {slice}: {source}")]
    Slice {
        case_id: String,
        phase: Phase,
        slice: usize,
        #[source]
        source: Box<SegError>,
    },
}

/// Which parts of the method are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PipelineMode {
    /// Whole slice through the segmenters, combined at model resolution and
    /// resized back with nearest neighbour.
    #[serde(rename = "original")]
    Original,
    /// One shared region (union of the three localizations), combined at
    /// model resolution, nearest back.
    #[serde(rename = "L")]
    Localized,
    /// Per-structure masks on the whole slice, each resized back with
    /// nearest neighbour and combined at native resolution.
    #[serde(rename = "D")]
    Decomposed,
    /// Per-structure regions and masks, nearest back.
    #[serde(rename = "L+D")]
    LocalizedDecomposed,
    /// Per-structure regions and masks with smoothed restoration.
    #[serde(rename = "L+D+PP")]
    Full,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 5] = [
        PipelineMode::Original,
        PipelineMode::Localized,
        PipelineMode::Decomposed,
        PipelineMode::LocalizedDecomposed,
        PipelineMode::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PipelineMode::Original => "original",
            PipelineMode::Localized => "L",
            PipelineMode::Decomposed => "D",
            PipelineMode::LocalizedDecomposed => "L+D",
            PipelineMode::Full => "L+D+PP",
        }
    }

    fn localizes(self) -> bool {
        matches!(
            self,
            PipelineMode::Localized | PipelineMode::LocalizedDecomposed | PipelineMode::Full
        )
    }
}

impl fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PipelineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        PipelineMode::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown pipeline mode `{s}`"))
    }
}

/// Six predictors indexed by [`Structure::index`].
pub struct SegBackends {
    pub localizers: [Box<dyn SlicePredictor>; 3],
    pub segmenters: [Box<dyn SlicePredictor>; 3],
}

impl SegBackends {
    /// Wraps every predictor so single-threaded ones are serialized.
    pub fn new(localizers: [Box<dyn SlicePredictor>; 3], segmenters: [Box<dyn SlicePredictor>; 3]) -> Self {
        Self {
            localizers: localizers.map(share_predictor),
            segmenters: segmenters.map(share_predictor),
        }
    }

    /// Same spec for all six roles.
    pub fn uniform(spec: &BackendSpec, cfg: &SegConfig, seed: u64) -> Result<Self, BackendError> {
        let specs = std::array::from_fn(|_| spec.clone());
        Self::from_specs(&specs, &specs, cfg, seed)
    }

    pub fn from_specs(
        localizers: &[BackendSpec; 3],
        segmenters: &[BackendSpec; 3],
        cfg: &SegConfig,
        seed: u64,
    ) -> Result<Self, BackendError> {
        let dims = cfg.model_dims();
        let build = |specs: &[BackendSpec; 3], salt: u64| -> Result<[Box<dyn SlicePredictor>; 3], BackendError> {
            let [a, b, c] = Structure::ALL.map(|s| specs[s.index()].build_predictor(s, dims, seed ^ salt));
            Ok([a?, b?, c?])
        };
        Ok(Self {
            localizers: build(localizers, 0x10CA)?,
            segmenters: build(segmenters, 0x5E6)?,
        })
    }

    pub fn localizer(&self, s: Structure) -> &dyn SlicePredictor {
        self.localizers[s.index()].as_ref()
    }

    pub fn segmenter(&self, s: Structure) -> &dyn SlicePredictor {
        self.segmenters[s.index()].as_ref()
    }
}

/// One slice and where it came from.
#[derive(Debug, Clone, Copy)]
pub struct SliceInput<'a> {
    pub image: &'a Grid2D,
    pub ground_truth: Option<&'a LabelMask>,
    pub case_id: &'a str,
    pub phase: Phase,
    pub slice_index: usize,
}

impl<'a> SliceInput<'a> {
    /// A slice with no provenance, for standalone use.
    pub fn bare(image: &'a Grid2D) -> Self {
        Self {
            image,
            ground_truth: None,
            case_id: "",
            phase: Phase::Ed,
            slice_index: 0,
        }
    }

    fn context(&self, region: Region) -> SliceContext<'a> {
        SliceContext {
            case_id: self.case_id,
            phase: self.phase,
            slice_index: self.slice_index,
            source_dims: self.image.dims(),
            region,
            ground_truth: self.ground_truth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub structure: Structure,
    pub step: Step,
    pub region: Option<Region>,
    pub input_dims: (usize, usize),
    pub model_dims: (usize, usize),
    pub output_dims: (usize, usize),
    /// Smoothing applied on restoration; `None` for nearest resampling.
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegResult {
    pub final_mask: LabelMask,
    pub per_structure: [BinaryMask; 3],
    pub regions: [Option<Region>; 3],
    pub trace: Vec<TraceEntry>,
}

/// Min-max normalization to `[0, 1]`; a flat image maps to zeros.
fn normalize(img: &Grid2D) -> Grid2D {
    let (lo, hi) = img.min_max();
    if hi > lo {
        img.map(|v| (v - lo) / (hi - lo))
    } else {
        img.map(|_| 0.0)
    }
}

fn predict(
    p: &dyn SlicePredictor,
    image: &Grid2D,
    ctx: &SliceContext<'_>,
    step: Step,
    structure: Structure,
) -> Result<Grid2D, SegError> {
    p.predict(image, ctx)
        .and_then(|out| check_probability_map(p.name(), out, image.dims()))
        .map_err(|source| SegError::Backend {
            step,
            structure,
            source,
        })
}

/// Crops `region` and resamples it to the model input.
fn model_view(image: &Grid2D, region: &Region, cfg: &SegConfig) -> Grid2D {
    let crop = image.crop(region.x0, region.y0, region.x1, region.y1);
    resize(&crop, cfg.model_input_size, cfg.model_input_size, ResizeMode::Bilinear)
}

/// Framed region around `structure`, or `None` when the localizer finds
/// nothing above threshold.
pub fn localize(
    input: &SliceInput<'_>,
    structure: Structure,
    loc: &dyn SlicePredictor,
    cfg: &SegConfig,
) -> Result<Option<Region>, SegError> {
    localize_normalized(input, &normalize(input.image), structure, loc, cfg)
}

fn localize_normalized(
    input: &SliceInput<'_>,
    normalized: &Grid2D,
    structure: Structure,
    loc: &dyn SlicePredictor,
    cfg: &SegConfig,
) -> Result<Option<Region>, SegError> {
    let (w, h) = input.image.dims();
    let full = Region::full(w, h);
    let view = model_view(normalized, &full, cfg);
    let prob = predict(loc, &view, &input.context(full), Step::Localize, structure)?;
    let found = BinaryMask::from_probability(&prob, cfg.threshold, structure);
    let Some(b) = bbox(&found) else {
        return Ok(None);
    };
    let m = cfg.model_input_size as f64;
    let sx = w as f64 / m;
    let sy = h as f64 / m;
    let x0 = ((b.x0 as f64 * sx).floor() as usize).min(w - 1);
    let y0 = ((b.y0 as f64 * sy).floor() as usize).min(h - 1);
    let x1 = ((b.x1 as f64 * sx).ceil() as usize).clamp(x0 + 1, w);
    let y1 = ((b.y1 as f64 * sy).ceil() as usize).clamp(y0 + 1, h);
    let raw = Region::new(x0, y0, x1, y1, (w, h)).expect("mapped box lies inside the slice");
    Ok(Some(frame_region(&raw, cfg.margin, cfg.aspect, (w, h))))
}

/// Probability map of `structure` over `region`, at model resolution.
fn segment_view(
    input: &SliceInput<'_>,
    normalized: &Grid2D,
    region: &Region,
    structure: Structure,
    seg: &dyn SlicePredictor,
    cfg: &SegConfig,
) -> Result<Grid2D, SegError> {
    let view = model_view(normalized, region, cfg);
    predict(seg, &view, &input.context(*region), Step::Segment, structure)
}

/// Zero grid shaped and spaced like `image`.
fn canvas(image: &Grid2D) -> Grid2D {
    let (w, h) = image.dims();
    Grid2D::zeros(w, h).with_spacing(image.spacing()).expect("spacing of a valid grid")
}

fn paste_binary(patch: &Grid2D, region: &Region, image: &Grid2D, structure: Structure) -> BinaryMask {
    let mut canvas = canvas(image);
    canvas.paste(patch, region.x0, region.y0);
    BinaryMask::new(canvas, structure).expect("patch is binary")
}

/// Segments one structure inside `region`, restoring with smoothing.
/// Returns the native-size mask and the sigma applied.
pub fn segment_structure(
    input: &SliceInput<'_>,
    region: Option<&Region>,
    structure: Structure,
    seg: &dyn SlicePredictor,
    cfg: &SegConfig,
) -> Result<(BinaryMask, Option<f64>), SegError> {
    segment_structure_normalized(input, &normalize(input.image), region, structure, seg, cfg)
}

fn segment_structure_normalized(
    input: &SliceInput<'_>,
    normalized: &Grid2D,
    region: Option<&Region>,
    structure: Structure,
    seg: &dyn SlicePredictor,
    cfg: &SegConfig,
) -> Result<(BinaryMask, Option<f64>), SegError> {
    let Some(region) = region else {
        return Ok((BinaryMask::new(canvas(input.image), structure).expect("zeros"), None));
    };
    let prob = segment_view(input, normalized, region, structure, seg, cfg)?;
    let (restored, sigma) =
        upscale_mask_smoothed_with(&prob, region.width(), region.height(), &cfg.sigma_model, cfg.threshold);
    Ok((paste_binary(&restored, region, input.image, structure), Some(sigma)))
}

/// Thresholds at model resolution and resizes back with nearest neighbour.
fn restore_nearest(prob: &Grid2D, region: &Region, threshold: f64) -> Grid2D {
    resize(&prob.threshold(threshold), region.width(), region.height(), ResizeMode::Nearest)
}

/// Segmenter outputs at model resolution, per structure, with the region
/// each was taken from.
type Views = [Option<(Region, Grid2D)>; 3];

/// Intermediate state of one slice, shared by every pipeline variant.
struct SliceWork<'s, 'a> {
    input: &'s SliceInput<'a>,
    backends: &'s SegBackends,
    cfg: &'s SegConfig,
    normalized: Grid2D,
    trace: Vec<TraceEntry>,
}

impl<'s, 'a> SliceWork<'s, 'a> {
    fn new(input: &'s SliceInput<'a>, backends: &'s SegBackends, cfg: &'s SegConfig) -> Result<Self, SegError> {
        cfg.validate()?;
        Ok(Self {
            input,
            backends,
            cfg,
            normalized: normalize(input.image),
            trace: Vec::new(),
        })
    }

    fn full(&self) -> Region {
        let (w, h) = self.input.image.dims();
        Region::full(w, h)
    }

    fn localize_all(&mut self) -> Result<[Option<Region>; 3], SegError> {
        let mut regions = [None; 3];
        for s in Structure::ALL {
            let r = localize_normalized(self.input, &self.normalized, s, self.backends.localizer(s), self.cfg)?;
            self.trace.push(TraceEntry {
                structure: s,
                step: Step::Localize,
                region: r,
                input_dims: self.input.image.dims(),
                model_dims: self.cfg.model_dims(),
                output_dims: r.map_or((0, 0), |r| (r.width(), r.height())),
                sigma: None,
            });
            regions[s.index()] = r;
        }
        Ok(regions)
    }

    fn views(&self, regions: [Option<Region>; 3]) -> Result<Views, SegError> {
        let mut out: Views = [None, None, None];
        for s in Structure::ALL {
            if let Some(r) = regions[s.index()] {
                let prob = segment_view(self.input, &self.normalized, &r, s, self.backends.segmenter(s), self.cfg)?;
                out[s.index()] = Some((r, prob));
            }
        }
        Ok(out)
    }

    fn record(&mut self, s: Structure, region: Option<Region>, sigma: Option<f64>) {
        let dims = region.map_or((0, 0), |r| (r.width(), r.height()));
        self.trace.push(TraceEntry {
            structure: s,
            step: Step::Segment,
            region,
            input_dims: dims,
            model_dims: self.cfg.model_dims(),
            output_dims: dims,
            sigma,
        });
    }

    /// Masks combined at model resolution, one nearest resize back.
    fn combined(&mut self, views: &Views) -> LabelMask {
        let Some((region, _)) = views[0] else {
            for s in Structure::ALL {
                self.record(s, None, None);
            }
            return LabelMask::new(canvas(self.input.image)).expect("zeros");
        };
        let [rv, myo, lv] = Structure::ALL.map(|s| {
            let (_, prob) = views[s.index()].as_ref().expect("shared region has every view");
            BinaryMask::from_probability(prob, self.cfg.threshold, s)
        });
        for s in Structure::ALL {
            self.record(s, Some(region), None);
        }
        let at_model = recompose(&rv, &myo, &lv).expect("model-size masks");
        let back = resize(at_model.grid(), region.width(), region.height(), ResizeMode::Nearest);
        let mut out = canvas(self.input.image);
        out.paste(&back, region.x0, region.y0);
        LabelMask::new(out).expect("nearest resampling keeps labels")
    }

    /// Each mask restored on its own, then combined at native resolution.
    fn separate(&mut self, views: &Views, smoothed: bool) -> LabelMask {
        let [rv, myo, lv] = Structure::ALL.map(|s| match &views[s.index()] {
            None => (BinaryMask::new(canvas(self.input.image), s).expect("zeros"), None, None),
            Some((r, prob)) => {
                let (patch, sigma) = if smoothed {
                    let (g, sigma) = upscale_mask_smoothed_with(
                        prob,
                        r.width(),
                        r.height(),
                        &self.cfg.sigma_model,
                        self.cfg.threshold,
                    );
                    (g, Some(sigma))
                } else {
                    (restore_nearest(prob, r, self.cfg.threshold), None)
                };
                (paste_binary(&patch, r, self.input.image, s), Some(*r), sigma)
            }
        });
        for (s, (_, region, sigma)) in Structure::ALL.iter().zip([&rv, &myo, &lv]) {
            self.record(*s, *region, *sigma);
        }
        recompose(&rv.0, &myo.0, &lv.0).expect("native-size masks")
    }

    fn finish(self, final_mask: LabelMask, regions: [Option<Region>; 3]) -> SegResult {
        SegResult {
            per_structure: decompose(&final_mask),
            final_mask,
            regions,
            trace: self.trace,
        }
    }
}

fn union_of(regions: &[Option<Region>; 3]) -> Option<Region> {
    regions.iter().flatten().copied().reduce(|a, b| a.union(&b))
}

/// Full method on one slice.
pub fn run_pipeline(input: &SliceInput<'_>, backends: &SegBackends, cfg: &SegConfig) -> Result<SegResult, SegError> {
    run_pipeline_mode(input, backends, cfg, PipelineMode::Full)
}

/// Runs one slice through the variant selected by `mode`.
pub fn run_pipeline_mode(
    input: &SliceInput<'_>,
    backends: &SegBackends,
    cfg: &SegConfig,
    mode: PipelineMode,
) -> Result<SegResult, SegError> {
    let mut work = SliceWork::new(input, backends, cfg)?;
    let full = [Some(work.full()); 3];
    let regions = if mode.localizes() { work.localize_all()? } else { full };
    let mask = match mode {
        PipelineMode::Original => {
            let views = work.views(full)?;
            work.combined(&views)
        }
        PipelineMode::Localized => {
            let views = work.views([union_of(&regions); 3])?;
            work.combined(&views)
        }
        PipelineMode::Decomposed | PipelineMode::LocalizedDecomposed => {
            let views = work.views(regions)?;
            work.separate(&views, false)
        }
        PipelineMode::Full => {
            let views = work.views(regions)?;
            work.separate(&views, true)
        }
    };
    Ok(work.finish(mask, regions))
}

/// Final masks of all five variants on one slice, in [`PipelineMode::ALL`]
/// order. Localizations and segmenter outputs are computed once and shared,
/// so each entry equals [`run_pipeline_mode`] for that mode.
pub fn ablate_slice(
    input: &SliceInput<'_>,
    backends: &SegBackends,
    cfg: &SegConfig,
) -> Result<[LabelMask; 5], SegError> {
    let mut work = SliceWork::new(input, backends, cfg)?;
    let regions = work.localize_all()?;
    let full_views = work.views([Some(work.full()); 3])?;
    let union_views = work.views([union_of(&regions); 3])?;
    let own_views = work.views(regions)?;
    Ok([
        work.combined(&full_views),
        work.combined(&union_views),
        work.separate(&full_views, false),
        work.separate(&own_views, false),
        work.separate(&own_views, true),
    ])
}

/// Runs every slice of one phase. Slices are processed concurrently.
pub fn segment_phase(
    case: &CaseRecord,
    phase: Phase,
    backends: &SegBackends,
    cfg: &SegConfig,
    mode: PipelineMode,
) -> Result<Vec<SegResult>, SegError> {
    use rayon::prelude::*;
    let vol = case.volume(phase);
    let gt = check_slices(case, phase)?;
    (0..vol.slices())
        .into_par_iter()
        .map(|k| {
            let image = vol.slice(k);
            let input = SliceInput {
                image: &image,
                ground_truth: gt.map(|g| &g[k]),
                case_id: &case.id,
                phase,
                slice_index: k,
            };
            run_pipeline_mode(&input, backends, cfg, mode).map_err(|e| slice_error(case, phase, k, e))
        })
        .collect()
}

/// [`ablate_slice`] over every slice of one phase.
pub fn ablate_phase(
    case: &CaseRecord,
    phase: Phase,
    backends: &SegBackends,
    cfg: &SegConfig,
) -> Result<Vec<[LabelMask; 5]>, SegError> {
    use rayon::prelude::*;
    let vol = case.volume(phase);
    let gt = check_slices(case, phase)?;
    (0..vol.slices())
        .into_par_iter()
        .map(|k| {
            let image = vol.slice(k);
            let input = SliceInput {
                image: &image,
                ground_truth: gt.map(|g| &g[k]),
                case_id: &case.id,
                phase,
                slice_index: k,
            };
            ablate_slice(&input, backends, cfg).map_err(|e| slice_error(case, phase, k, e))
        })
        .collect()
}

fn check_slices(case: &CaseRecord, phase: Phase) -> Result<Option<&[LabelMask]>, SegError> {
    let gt = case.ground_truth(phase);
    let n = case.volume(phase).slices();
    match gt {
        Some(g) if g.len() != n => Err(SegError::SliceCount {
            case_id: case.id.clone(),
            phase,
            gt: g.len(),
            image: n,
        }),
        _ => Ok(gt),
    }
}

fn slice_error(case: &CaseRecord, phase: Phase, slice: usize, e: SegError) -> SegError {
    SegError::Slice {
        case_id: case.id.clone(),
        phase,
        slice,
        source: Box::new(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ConstantPredictor, OraclePredictor};
    use crate::cascade::PathologyClass;
    use crate::dataset::{make_phantom, PhantomDims};
    use crate::metrics::dice;

    fn oracle_backends() -> SegBackends {
        SegBackends::uniform(&BackendSpec::Oracle, &SegConfig::default(), 0).unwrap()
    }

    fn constant(v: f64) -> Box<dyn SlicePredictor> {
        Box::new(ConstantPredictor::new(v))
    }

    fn ellipse(w: usize, h: usize, cx: f64, cy: f64, a: f64, b: f64, code: f64) -> LabelMask {
        LabelMask::new(Grid2D::from_fn(w, h, |x, y| {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / a, (y as f64 + 0.5 - cy) / b);
            if dx * dx + dy * dy <= 1.0 {
                code
            } else {
                0.0
            }
        }))
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(SegConfig::default().validate().is_ok());
        for cfg in [
            SegConfig { model_input_size: 31, ..Default::default() },
            SegConfig { threshold: 0.0, ..Default::default() },
            SegConfig { threshold: 1.0, ..Default::default() },
            SegConfig { margin: -0.1, ..Default::default() },
            SegConfig { aspect: 0.0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(SegError::InvalidConfig(_))));
        }
    }

    #[test]
    fn mode_labels_parse() {
        for m in PipelineMode::ALL {
            assert_eq!(m.label().parse::<PipelineMode>().unwrap(), m);
        }
        assert!("LDPP".parse::<PipelineMode>().is_err());
    }

    #[test]
    fn oracle_localizer_contains_gt_bbox() {
        let gt = ellipse(96, 80, 40.0, 44.0, 14.0, 9.0, 3.0);
        let image = gt.grid().map(|v| v * 100.0);
        let input = SliceInput { ground_truth: Some(&gt), ..SliceInput::bare(&image) };
        let cfg = SegConfig::default();
        let r = localize(&input, Structure::Lv, &OraclePredictor::new(Structure::Lv), &cfg)
            .unwrap()
            .unwrap();
        let truth = bbox(&gt.structure(Structure::Lv)).unwrap();
        assert!(r.contains(&truth), "{r:?} vs {truth:?}");
    }

    #[test]
    fn zero_localizer_gives_empty_region() {
        let image = Grid2D::filled(64, 64, 1.0);
        let r = localize(&SliceInput::bare(&image), Structure::Rv, &ConstantPredictor::new(0.0), &SegConfig::default());
        assert_eq!(r.unwrap(), None);
    }

    struct Shifted(Structure);

    impl SlicePredictor for Shifted {
        fn name(&self) -> &str {
            "shifted"
        }

        fn predict(&self, image: &Grid2D, ctx: &SliceContext<'_>) -> crate::backend::Result<Grid2D> {
            let gt = ctx.ground_truth.unwrap().structure(self.0).into_grid();
            let (w, h) = gt.dims();
            let moved = Grid2D::from_fn(w, h, |x, y| if x >= 1 { gt.get(x - 1, y) } else { 0.0 });
            Ok(resize(&moved, image.width(), image.height(), ResizeMode::Bilinear))
        }
    }

    #[test]
    fn shifted_localizer_still_covers_structure() {
        for (i, r) in [5.0, 8.0, 12.0, 20.0].into_iter().enumerate() {
            let gt = ellipse(90, 90, 45.0 + i as f64, 44.0, r, r * 0.8, 3.0);
            let image = gt.grid().clone();
            let input = SliceInput { ground_truth: Some(&gt), ..SliceInput::bare(&image) };
            let region = localize(&input, Structure::Lv, &Shifted(Structure::Lv), &SegConfig::default())
                .unwrap()
                .unwrap();
            let lv = gt.structure(Structure::Lv);
            let (w, h) = lv.dims();
            let total = lv.count();
            let inside = (0..h)
                .flat_map(|y| (0..w).map(move |x| (x, y)))
                .filter(|&(x, y)| lv.is_set(x, y) && region.contains_point(x, y))
                .count();
            assert!(inside as f64 >= 0.95 * total as f64, "r={r}: {inside}/{total}");
        }
    }

    #[test]
    fn oracle_segmenter_on_ellipse() {
        let gt = ellipse(120, 100, 60.0, 52.0, 22.0, 15.0, 2.0);
        let image = gt.grid().clone();
        let input = SliceInput { ground_truth: Some(&gt), ..SliceInput::bare(&image) };
        let cfg = SegConfig::default();
        let truth = gt.structure(Structure::Myo);
        let region = frame_region(&bbox(&truth).unwrap(), 0.15, 1.0, (120, 100));
        let (mask, sigma) =
            segment_structure(&input, Some(&region), Structure::Myo, &OraclePredictor::new(Structure::Myo), &cfg)
                .unwrap();
        assert!(sigma.is_some());
        assert!(dice(&mask, &truth).unwrap() >= 0.95);
    }

    #[test]
    fn degenerate_segmenter_inputs() {
        let image = Grid2D::filled(40, 40, 5.0);
        let input = SliceInput::bare(&image);
        let cfg = SegConfig::default();
        let r = Region::full(40, 40);
        let (m, _) = segment_structure(&input, Some(&r), Structure::Rv, &ConstantPredictor::new(0.0), &cfg).unwrap();
        assert!(m.is_empty());
        // Empty region: inference is skipped, so even a failing backend is fine.
        let (m, s) = segment_structure(&input, None, Structure::Rv, &OraclePredictor::new(Structure::Rv), &cfg).unwrap();
        assert!(m.is_empty() && s.is_none());
    }

    fn phantom_slices() -> Vec<(Grid2D, LabelMask)> {
        let dims = PhantomDims { width: 128, height: 128, slices: 3 };
        PathologyClass::ALL
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| {
                let case = make_phantom(i as u64, c, dims);
                let gt = case.ed_gt.clone().unwrap();
                (0..3).map(move |k| (case.ed_volume.slice(k), gt[k].clone())).collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn oracle_pipeline_on_phantoms() {
        let backends = oracle_backends();
        let cfg = SegConfig::default();
        for (image, gt) in phantom_slices() {
            let input = SliceInput { ground_truth: Some(&gt), ..SliceInput::bare(&image) };
            let res = run_pipeline(&input, &backends, &cfg).unwrap();
            assert_eq!(res.final_mask.dims(), image.dims());
            for s in Structure::ALL {
                let d = dice(&res.per_structure[s.index()], &gt.structure(s)).unwrap();
                assert!(d >= 0.95, "{s}: {d}");
            }
            let (got, want) = (res.final_mask.histogram(), gt.histogram());
            for l in 0..4 {
                let tol = 0.05 * want[l] as f64;
                assert!((got[l] as f64 - want[l] as f64).abs() <= tol, "label {l}: {got:?} vs {want:?}");
            }
            assert_eq!(res.trace.len(), 6);
        }
    }

    #[test]
    fn identity_config_reproduces_ground_truth() {
        for (image, gt) in phantom_slices() {
            let cfg = SegConfig {
                model_input_size: 128,
                margin: 0.0,
                sigma_model: SigmaModel::constant(0.0),
                ..Default::default()
            };
            let input = SliceInput { ground_truth: Some(&gt), ..SliceInput::bare(&image) };
            let res = run_pipeline(&input, &oracle_backends(), &cfg).unwrap();
            assert_eq!(res.final_mask, gt);
        }
    }

    #[test]
    fn zero_backends_give_background() {
        let image = Grid2D::from_fn(64, 48, |x, y| (x * y) as f64);
        let cfg = SegConfig::default();
        let zeros = SegBackends::new(
            [constant(0.0), constant(0.0), constant(0.0)],
            [constant(0.0), constant(0.0), constant(0.0)],
        );
        let res = run_pipeline(&SliceInput::bare(&image), &zeros, &cfg).unwrap();
        assert_eq!(res.final_mask, LabelMask::background(64, 48));
        assert!(res.regions.iter().all(|r| r.is_none()));

        let (_, gt) = phantom_slices().swap_remove(0);
        let image = gt.grid().clone();
        let input = SliceInput { ground_truth: Some(&gt), ..SliceInput::bare(&image) };
        let mixed = SegBackends::new(
            Structure::ALL.map(|s| Box::new(OraclePredictor::new(s)) as Box<dyn SlicePredictor>),
            [constant(0.0), constant(0.0), constant(0.0)],
        );
        let res = run_pipeline(&input, &mixed, &cfg).unwrap();
        assert_eq!(res.final_mask.histogram()[0], 128 * 128);
        assert!(res.regions.iter().all(|r| r.is_some()));
        assert!(res.trace.iter().filter(|t| t.step == Step::Localize).all(|t| t.region.is_some()));
    }

    #[test]
    fn backend_failure_names_step_and_structure() {
        let image = Grid2D::filled(64, 64, 1.0);
        let res = run_pipeline(&SliceInput::bare(&image), &oracle_backends(), &SegConfig::default());
        assert!(matches!(
            res,
            Err(SegError::Backend { step: Step::Localize, structure: Structure::Rv, .. })
        ));
        let mixed = SegBackends::new(
            [constant(1.0), constant(1.0), constant(1.0)],
            Structure::ALL.map(|s| Box::new(OraclePredictor::new(s)) as Box<dyn SlicePredictor>),
        );
        let res = run_pipeline(&SliceInput::bare(&image), &mixed, &SegConfig::default());
        assert!(matches!(
            res,
            Err(SegError::Backend { step: Step::Segment, structure: Structure::Rv, .. })
        ));
    }

    struct OutOfRange;

    impl SlicePredictor for OutOfRange {
        fn name(&self) -> &str {
            "wrong-size"
        }

        fn predict(&self, _image: &Grid2D, _ctx: &SliceContext<'_>) -> crate::backend::Result<Grid2D> {
            Ok(Grid2D::filled(3, 3, 1.0))
        }
    }

    #[test]
    fn output_contract_is_enforced() {
        let image = Grid2D::filled(64, 64, 1.0);
        let r = localize(&SliceInput::bare(&image), Structure::Lv, &OutOfRange, &SegConfig::default());
        assert!(matches!(
            r,
            Err(SegError::Backend { source: BackendError::BadOutputShape { .. }, .. })
        ));
    }

    #[test]
    fn output_dims_match_input_for_many_sizes() {
        let backends = oracle_backends();
        let cfg = SegConfig { model_input_size: 64, ..Default::default() };
        for (w, h) in [(32, 32), (33, 57), (200, 90), (512, 64)] {
            let gt = ellipse(w, h, w as f64 / 2.0, h as f64 / 2.0, w as f64 / 6.0, h as f64 / 5.0, 3.0);
            let image = gt.grid().clone();
            let input = SliceInput { ground_truth: Some(&gt), ..SliceInput::bare(&image) };
            for mode in PipelineMode::ALL {
                let res = run_pipeline_mode(&input, &backends, &cfg, mode).unwrap();
                assert_eq!(res.final_mask.dims(), (w, h), "{mode}");
            }
        }
    }

    #[test]
    fn structure_order_does_not_change_masks() {
        let (image, gt) = phantom_slices().swap_remove(4);
        let input = SliceInput { ground_truth: Some(&gt), ..SliceInput::bare(&image) };
        let cfg = SegConfig::default();
        let backends = oracle_backends();
        let mut forward = Vec::new();
        for s in Structure::ALL {
            let r = localize(&input, s, backends.localizer(s), &cfg).unwrap();
            forward.push(segment_structure(&input, r.as_ref(), s, backends.segmenter(s), &cfg).unwrap().0);
        }
        for s in Structure::ALL.iter().rev() {
            let r = localize(&input, *s, backends.localizer(*s), &cfg).unwrap();
            let m = segment_structure(&input, r.as_ref(), *s, backends.segmenter(*s), &cfg).unwrap().0;
            assert_eq!(m, forward[s.index()]);
        }
        let res = run_pipeline(&input, &backends, &cfg).unwrap();
        let expected = recompose(&forward[0], &forward[1], &forward[2]).unwrap();
        assert_eq!(res.final_mask, expected);
    }

    #[test]
    fn ablation_rows_equal_single_mode_runs() {
        let cfg = SegConfig { model_input_size: 96, ..Default::default() };
        let case = make_phantom(5, PathologyClass::Arv, PhantomDims { width: 80, height: 72, slices: 3 });
        for seed in 0..2 {
            let backends = SegBackends::uniform(&BackendSpec::Noisy(1), &cfg, seed).unwrap();
            let rows = ablate_phase(&case, Phase::Ed, &backends, &cfg).unwrap();
            for mode in PipelineMode::ALL {
                let single = segment_phase(&case, Phase::Ed, &backends, &cfg, mode).unwrap();
                for (k, res) in single.iter().enumerate() {
                    assert_eq!(res.final_mask, rows[k][mode as usize], "{mode} slice {k}");
                }
            }
        }
    }

    #[test]
    fn phase_runs_every_slice() {
        let case = make_phantom(2, PathologyClass::Dcm, PhantomDims { width: 64, height: 64, slices: 4 });
        let cfg = SegConfig { model_input_size: 64, ..Default::default() };
        let out = segment_phase(&case, Phase::Es, &oracle_backends(), &cfg, PipelineMode::Full).unwrap();
        assert_eq!(out.len(), 4);
        let mut no_gt = case.clone();
        no_gt.es_gt = None;
        let err = segment_phase(&no_gt, Phase::Es, &oracle_backends(), &cfg, PipelineMode::Full).unwrap_err();
        assert!(matches!(err, SegError::Slice { slice: _, .. }));
    }
}
