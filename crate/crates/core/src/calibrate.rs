//! Fitting the scale-to-sigma model from ground-truth round trips.
//!
//! For each case and scale factor, every ground-truth structure mask is
//! shrunk by the factor, restored with [`upscale_mask_smoothed_with`] at a
//! fixed sigma, and scored against the original. The sigma with the best
//! pooled Dice on a grid becomes one `(scale, sigma)` point of the fit.

use crate::dataset::{CaseRecord, Phase};
use crate::grid::{
    fit_sigma_model, gaussian_blur, resize, upscale_mask_smoothed_with, Grid2D, GridError, ResizeMode, SigmaModel,
};
use crate::mask::{BinaryMask, Structure};
use crate::metrics::dice_volume;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("no calibration case has ground truth")]
    NoGroundTruth,
    #[error("sigma fit: {0}")]
    Fit(#[from] GridError),
    #[error("invalid calibration config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub scales: Vec<f64>,
    pub sigma_max: f64,
    pub step: f64,
    pub threshold: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            scales: vec![2.0, 3.0, 4.0],
            sigma_max: 5.0,
            step: 0.1,
            threshold: 0.5,
        }
    }
}

impl CalibrationConfig {
    fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |m: String| Err(CalibrationError::InvalidConfig(m));
        if self.scales.iter().any(|s| !(*s >= 1.0 && s.is_finite())) {
            return bad(format!("scales {:?} must be finite and at least 1", self.scales));
        }
        if !(self.step > 0.0 && self.sigma_max >= 0.0 && self.sigma_max.is_finite()) {
            return bad(format!("sigma grid 0..={} step {}", self.sigma_max, self.step));
        }
        Ok(())
    }

    /// `0, step, 2 step, ...` up to `sigma_max` inclusive.
    pub fn grid(&self) -> Vec<f64> {
        let n = (self.sigma_max / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| i as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub case_id: String,
    pub scale: f64,
    pub sigma: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub model: SigmaModel,
    pub points: Vec<CalibrationPoint>,
}

/// Non-empty ground-truth structure masks of both phases.
pub fn calibration_masks(case: &CaseRecord) -> Vec<BinaryMask> {
    Phase::ALL
        .iter()
        .filter_map(|&p| case.ground_truth(p))
        .flatten()
        .flat_map(|m| Structure::ALL.map(|s| m.structure(s)))
        .filter(|m| !m.is_empty())
        .collect()
}

/// Dims after shrinking by `scale`, at least one pixel.
pub fn shrunk_dims(dims: (usize, usize), scale: f64) -> (usize, usize) {
    let f = |n: usize| ((n as f64 / scale).round() as usize).max(1);
    (f(dims.0), f(dims.1))
}

/// Bilinear shrink, binarized at `threshold`.
pub fn shrink(mask: &BinaryMask, scale: f64, threshold: f64) -> BinaryMask {
    let (w, h) = shrunk_dims(mask.dims(), scale);
    let small = resize(mask.grid(), w, h, ResizeMode::Bilinear);
    BinaryMask::from_probability(&small, threshold, mask.structure())
}

/// Pooled Dice of restoring shrunk masks with a fixed sigma.
pub fn round_trip_dice(originals: &[BinaryMask], shrunk: &[BinaryMask], sigma: f64, threshold: f64) -> f64 {
    let model = SigmaModel::constant(sigma);
    let restored: Vec<BinaryMask> = originals
        .iter()
        .zip(shrunk)
        .map(|(o, s)| {
            let (w, h) = o.dims();
            let (g, _) = upscale_mask_smoothed_with(s.grid(), w, h, &model, threshold);
            BinaryMask::new(g, o.structure()).expect("thresholded output is binary")
        })
        .collect();
    dice_volume(&restored, originals).expect("restored to original dims")
}

/// Best sigma over `grid`; ties go to the smallest sigma. Returns
/// `(sigma, dice)`.
pub fn best_sigma(masks: &[BinaryMask], scale: f64, grid: &[f64], threshold: f64) -> (f64, f64) {
    // The bilinear restoration does not depend on sigma, so it is done once.
    let restored: Vec<Grid2D> = masks
        .iter()
        .map(|m| {
            let (w, h) = m.dims();
            resize(shrink(m, scale, threshold).grid(), w, h, ResizeMode::Bilinear)
        })
        .collect();
    let mut best = (0.0, f64::NEG_INFINITY);
    for &sigma in grid {
        let smoothed: Vec<BinaryMask> = restored
            .iter()
            .zip(masks)
            .map(|(r, m)| {
                let g = gaussian_blur(r, sigma).expect("grid sigmas are non-negative");
                BinaryMask::new(g.threshold(threshold), m.structure()).expect("thresholded")
            })
            .collect();
        let d = dice_volume(&smoothed, masks).expect("same dims");
        if d > best.1 {
            best = (sigma, d);
        }
    }
    best
}

/// One point per `(case, scale)`, then the least-squares line through them.
pub fn calibrate(cases: &[CaseRecord], cfg: &CalibrationConfig) -> Result<Calibration, CalibrationError> {
    use rayon::prelude::*;
    cfg.validate()?;
    let grid = cfg.grid();
    let jobs: Vec<(&CaseRecord, Vec<BinaryMask>)> = cases
        .iter()
        .map(|c| (c, calibration_masks(c)))
        .filter(|(_, m)| !m.is_empty())
        .collect();
    if jobs.is_empty() {
        return Err(CalibrationError::NoGroundTruth);
    }
    let points: Vec<CalibrationPoint> = jobs
        .par_iter()
        .flat_map_iter(|(case, masks)| {
            let grid = &grid;
            cfg.scales.iter().map(move |&scale| {
                let (sigma, dice) = best_sigma(masks, scale, grid, cfg.threshold);
                CalibrationPoint {
                    case_id: case.id.clone(),
                    scale,
                    sigma,
                    dice,
                }
            })
        })
        .collect();
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.scale, p.sigma)).collect();
    let model = fit_sigma_model(&pairs)?;
    Ok(Calibration { model, points })
}

pub fn save_model(path: &Path, model: &SigmaModel) -> Result<(), CalibrationError> {
    let json = serde_json::to_string_pretty(model).expect("model is serializable");
    std::fs::write(path, json + "\n").map_err(|source| CalibrationError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<SigmaModel, CalibrationError> {
    let text = std::fs::read_to_string(path).map_err(|source| CalibrationError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CalibrationError::Json {
        path: path.display().to_string(),
        source,
    })
}
