//! Raster carriers and the resampling / Gaussian smoothing primitives used by
//! segmentation postprocessing.
//!
//! Everything here is a pure function over immutable inputs.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GridError {
    #[error("data length {actual} does not match {width}x{height}")]
    LengthMismatch {
        width: usize,
        height: usize,
        actual: usize,
    },
    #[error("grid dimensions must be at least 1x1, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("pixel spacing must be positive and finite, got {0:?}")]
    BadSpacing(Vec<f64>),
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("sigma must be non-negative and finite, got {0}")]
    InvalidSigma(f64),
    #[error("degenerate sigma fit: need at least 2 distinct scale factors, got {distinct}")]
    DegenerateFit { distinct: usize },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

pub type Result<T> = std::result::Result<T, GridError>;

fn check_spacing(spacing: &[f64]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(GridError::BadSpacing(spacing.to_vec()))
    }
}

/// A single 2-D slice, row-major, with physical pixel spacing in millimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    width: usize,
    height: usize,
    data: Vec<f64>,
    spacing: (f64, f64),
}

impl Grid2D {
    pub fn new(width: usize, height: usize, data: Vec<f64>, spacing: (f64, f64)) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GridError::EmptyDimensions { width, height });
        }
        if data.len() != width * height {
            return Err(GridError::LengthMismatch {
                width,
                height,
                actual: data.len(),
            });
        }
        check_spacing(&[spacing.0, spacing.1])?;
        Ok(Self {
            width,
            height,
            data,
            spacing,
        })
    }

    /// Unit-spaced grid filled with `value`.
    ///
    /// Panics if either dimension is zero.
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height], (1.0, 1.0))
            .expect("filled grid dimensions must be non-zero")
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    /// Builds a unit-spaced grid by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data, (1.0, 1.0)).expect("from_fn dimensions must be non-zero")
    }

    pub fn with_spacing(mut self, spacing: (f64, f64)) -> Result<Self> {
        check_spacing(&[spacing.0, spacing.1])?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn spacing(&self) -> (f64, f64) {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    /// Pixel lookup with coordinates clamped into the grid (edge replication).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
            spacing: self.spacing,
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Copies the rectangle `[x0, x1) x [y0, y1)`.
    ///
    /// Panics if the rectangle is empty or leaves the grid.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        assert!(x0 < x1 && x1 <= self.width && y0 < y1 && y1 <= self.height);
        let mut data = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for y in y0..y1 {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x1]);
        }
        Self {
            width: x1 - x0,
            height: y1 - y0,
            data,
            spacing: self.spacing,
        }
    }

    /// Writes `patch` into this grid with its top-left corner at `(x0, y0)`.
    pub fn paste(&mut self, patch: &Grid2D, x0: usize, y0: usize) {
        assert!(x0 + patch.width <= self.width && y0 + patch.height <= self.height);
        for y in 0..patch.height {
            let dst = (y0 + y) * self.width + x0;
            self.data[dst..dst + patch.width]
                .copy_from_slice(&patch.data[y * patch.width..(y + 1) * patch.width]);
        }
    }

    /// 1 where the value is `>= threshold`, else 0.
    pub fn threshold(&self, threshold: f64) -> Self {
        self.map(|v| if v >= threshold { 1.0 } else { 0.0 })
    }
}

/// A stack of equally sized slices, slice-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume3D {
    width: usize,
    height: usize,
    slices: usize,
    data: Vec<f64>,
    spacing: (f64, f64, f64),
}

impl Volume3D {
    pub fn new(
        width: usize,
        height: usize,
        slices: usize,
        data: Vec<f64>,
        spacing: (f64, f64, f64),
    ) -> Result<Self> {
        if width == 0 || height == 0 || slices == 0 {
            return Err(GridError::EmptyDimensions { width, height });
        }
        if data.len() != width * height * slices {
            return Err(GridError::LengthMismatch {
                width,
                height,
                actual: data.len(),
            });
        }
        check_spacing(&[spacing.0, spacing.1, spacing.2])?;
        Ok(Self {
            width,
            height,
            slices,
            data,
            spacing,
        })
    }

    /// Stacks slices; all must share dimensions.
    pub fn from_slices(slices: &[Grid2D], dz: f64) -> Result<Self> {
        let first = slices.first().ok_or(GridError::EmptyDimensions {
            width: 0,
            height: 0,
        })?;
        let (w, h) = first.dims();
        let mut data = Vec::with_capacity(w * h * slices.len());
        for s in slices {
            if s.dims() != (w, h) {
                return Err(GridError::DimensionMismatch(w, h, s.width, s.height));
            }
            data.extend_from_slice(s.data());
        }
        let (dx, dy) = first.spacing();
        Self::new(w, h, slices.len(), data, (dx, dy, dz))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.slices)
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn slice(&self, k: usize) -> Grid2D {
        assert!(k < self.slices, "slice {k} out of range {}", self.slices);
        let n = self.width * self.height;
        Grid2D {
            width: self.width,
            height: self.height,
            data: self.data[k * n..(k + 1) * n].to_vec(),
            spacing: (self.spacing.0, self.spacing.1),
        }
    }

    pub fn iter_slices(&self) -> impl Iterator<Item = Grid2D> + '_ {
        (0..self.slices).map(move |k| self.slice(k))
    }
}

/// Continuous isotropic 2-D Gaussian density at pixel offset `(x, y)`.
pub fn gaussian_eval(x: f64, y: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(GridError::NonPositiveSigma(sigma));
    }
    let s2 = sigma * sigma;
    Ok((-(x * x + y * y) / (2.0 * s2)).exp() / (2.0 * PI * s2))
}

/// Discrete separable Gaussian, truncated at `ceil(3 sigma)` and renormalized.
///
/// The 1-D weights sum to 1, so the 2-D outer product also sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    sigma: f64,
    radius: usize,
    weights: Vec<f64>,
}

impl GaussianKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(GridError::InvalidSigma(sigma));
        }
        if sigma == 0.0 {
            return Ok(Self {
                sigma,
                radius: 0,
                weights: vec![1.0],
            });
        }
        let radius = (3.0 * sigma).ceil() as usize;
        // 1-D marginal of the 2-D density; constants cancel on normalization.
        let raw: Vec<f64> = (-(radius as isize)..=radius as isize)
            .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        Ok(Self {
            sigma,
            radius,
            weights: raw.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight of the full 2-D kernel at offset `(dx, dy)` from the center.
    pub fn weight_2d(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        if dx.abs() > r || dy.abs() > r {
            return 0.0;
        }
        self.weights[(dx + r) as usize] * self.weights[(dy + r) as usize]
    }
}

/// Separable Gaussian blur (horizontal pass, then vertical) with edge replication.
///
/// `sigma == 0` returns the input unchanged.
pub fn gaussian_blur(img: &Grid2D, sigma: f64) -> Result<Grid2D> {
    let kernel = GaussianKernel::new(sigma)?;
    if kernel.radius == 0 {
        return Ok(img.clone());
    }
    let (w, h) = img.dims();
    // Only the nonzero support plus radius + 1 can change; beyond it the
    // replicated crop edge is zero, exactly like the surrounding image.
    let Some((x0, y0, x1, y1)) = support(img) else {
        return Ok(img.clone());
    };
    let pad = kernel.radius + 1;
    let (x0, y0) = (x0.saturating_sub(pad), y0.saturating_sub(pad));
    let (x1, y1) = ((x1 + pad).min(w), (y1 + pad).min(h));
    if (x0, y0, x1, y1) == (0, 0, w, h) {
        return Ok(blur_full(img, &kernel));
    }
    let part = blur_full(&img.crop(x0, y0, x1, y1), &kernel);
    let mut out = Grid2D {
        width: w,
        height: h,
        data: vec![0.0; w * h],
        spacing: img.spacing,
    };
    out.paste(&part, x0, y0);
    Ok(out)
}

/// Half-open bounding box of nonzero values.
fn support(img: &Grid2D) -> Option<(usize, usize, usize, usize)> {
    let (w, h) = img.dims();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        let row = &img.data[y * w..(y + 1) * w];
        if let Some(first) = row.iter().position(|&v| v != 0.0) {
            let last = row.iter().rposition(|&v| v != 0.0).expect("row has a nonzero");
            x0 = x0.min(first);
            x1 = x1.max(last + 1);
            y0 = y0.min(y);
            y1 = y + 1;
        }
    }
    (x1 > 0).then_some((x0, y0, x1, y1))
}

fn blur_full(img: &Grid2D, kernel: &GaussianKernel) -> Grid2D {
    let (w, h) = img.dims();
    let r = kernel.radius as isize;
    let weights = &kernel.weights;

    let mut horizontal = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wt) in weights.iter().enumerate() {
                acc += wt * img.get_clamped(x as isize + k as isize - r, y as isize);
            }
            horizontal[y * w + x] = acc;
        }
    }

    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, wt) in weights.iter().enumerate() {
                let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                acc += wt * horizontal[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Grid2D {
        width: w,
        height: h,
        data: out,
        spacing: img.spacing,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Nearest,
    Bilinear,
}

/// Resamples with pixel-center alignment: `src = (dst + 0.5) * scale - 0.5`.
///
/// Spacing is rescaled so the physical extent is preserved. Panics on a zero
/// target dimension.
pub fn resize(img: &Grid2D, new_w: usize, new_h: usize, mode: ResizeMode) -> Grid2D {
    assert!(new_w >= 1 && new_h >= 1, "resize target must be at least 1x1");
    let (w, h) = img.dims();
    if (w, h) == (new_w, new_h) {
        return img.clone();
    }
    let sx = w as f64 / new_w as f64;
    let sy = h as f64 / new_h as f64;
    let mut data = Vec::with_capacity(new_w * new_h);
    match mode {
        ResizeMode::Nearest => {
            let xs: Vec<usize> = (0..new_w)
                .map(|x| (((x as f64 + 0.5) * sx).floor() as usize).min(w - 1))
                .collect();
            for y in 0..new_h {
                let yy = (((y as f64 + 0.5) * sy).floor() as usize).min(h - 1);
                data.extend(xs.iter().map(|&xx| img.get(xx, yy)));
            }
        }
        ResizeMode::Bilinear => {
            let taps = |n_out: usize, scale: f64, n_in: usize| -> Vec<(usize, usize, f64)> {
                (0..n_out)
                    .map(|d| {
                        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                        let i0 = s.floor() as usize;
                        let i1 = (i0 + 1).min(n_in - 1);
                        (i0, i1, s - i0 as f64)
                    })
                    .collect()
            };
            let xt = taps(new_w, sx, w);
            let yt = taps(new_h, sy, h);
            for &(y0, y1, fy) in &yt {
                for &(x0, x1, fx) in &xt {
                    let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
                    let bottom = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
    }
    Grid2D {
        width: new_w,
        height: new_h,
        data,
        spacing: (img.spacing.0 * sx, img.spacing.1 * sy),
    }
}

pub const SIGMA_MIN: f64 = 0.0;
pub const SIGMA_MAX: f64 = 10.0;

/// Linear map from resampling scale factor to smoothing sigma, clamped to
/// `[SIGMA_MIN, SIGMA_MAX]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaModel {
    pub slope: f64,
    pub intercept: f64,
    #[serde(default)]
    pub points: Vec<(f64, f64)>,
}

impl SigmaModel {
    /// A model that always predicts `sigma` (no calibration points).
    pub fn constant(sigma: f64) -> Self {
        Self {
            slope: 0.0,
            intercept: sigma,
            points: Vec::new(),
        }
    }

    pub fn predict(&self, scale_factor: f64) -> f64 {
        let raw = self.slope * scale_factor + self.intercept;
        if raw.is_nan() {
            return SIGMA_MIN;
        }
        raw.clamp(SIGMA_MIN, SIGMA_MAX)
    }

    /// Signed residuals `best_sigma - (slope * scale + intercept)`, unclamped.
    pub fn residuals(&self) -> Vec<f64> {
        self.points
            .iter()
            .map(|&(s, sigma)| sigma - (self.slope * s + self.intercept))
            .collect()
    }
}

impl Default for SigmaModel {
    /// Fit over the training split of the default phantom set (100 cases of
    /// 128x128x6, seed 0) at scales 2, 3 and 4 with a 0.1 sigma grid; the
    /// `sigma_calibration` example reruns it.
    fn default() -> Self {
        Self {
            slope: DEFAULT_SIGMA_SLOPE,
            intercept: DEFAULT_SIGMA_INTERCEPT,
            points: Vec::new(),
        }
    }
}

pub const DEFAULT_SIGMA_SLOPE: f64 = 0.4715;
pub const DEFAULT_SIGMA_INTERCEPT: f64 = 0.2558;

/// Ordinary least squares fit of `best_sigma` against `scale_factor`.
pub fn fit_sigma_model(points: &[(f64, f64)]) -> Result<SigmaModel> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if points.len() < 2 || distinct.len() < 2 {
        return Err(GridError::DegenerateFit {
            distinct: distinct.len(),
        });
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    let slope = sxy / sxx;
    Ok(SigmaModel {
        slope,
        intercept: mean_y - slope * mean_x,
        points: points.to_vec(),
    })
}

/// Scale factor used to pick sigma when resampling `from` to `to`: the larger
/// of the two per-axis ratios.
pub fn scale_factor(from: (usize, usize), to: (usize, usize)) -> f64 {
    (to.0 as f64 / from.0 as f64).max(to.1 as f64 / from.1 as f64)
}

/// Bilinear resize, Gaussian blur with the model's sigma, then binarize.
///
/// Accepts binary masks or probability maps in `[0, 1]`. Returns the binary
/// result and the sigma that was applied.
pub fn upscale_mask_smoothed_with(
    mask: &Grid2D,
    target_w: usize,
    target_h: usize,
    model: &SigmaModel,
    threshold: f64,
) -> (Grid2D, f64) {
    let sigma = model.predict(scale_factor(mask.dims(), (target_w, target_h)));
    let resized = resize(mask, target_w, target_h, ResizeMode::Bilinear);
    let blurred = gaussian_blur(&resized, sigma).expect("predicted sigma is clamped and finite");
    (blurred.threshold(threshold), sigma)
}

/// [`upscale_mask_smoothed_with`] at the default 0.5 binarization threshold.
pub fn upscale_mask_smoothed(
    mask: &Grid2D,
    target_w: usize,
    target_h: usize,
    model: &SigmaModel,
) -> Grid2D {
    upscale_mask_smoothed_with(mask, target_w, target_h, model, 0.5).0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_conv(img: &Grid2D, sigma: f64) -> Grid2D {
        let k = GaussianKernel::new(sigma).unwrap();
        let r = k.radius() as isize;
        Grid2D::from_fn(img.width(), img.height(), |x, y| {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    acc += k.weight_2d(dx, dy) * img.get_clamped(x as isize - dx, y as isize - dy);
                }
            }
            acc
        })
    }

    #[test]
    fn gaussian_eval_values() {
        let g0 = gaussian_eval(0.0, 0.0, 1.0).unwrap();
        assert!((g0 - 0.159_154_943_091_895_34).abs() < 1e-12);
        let g1 = gaussian_eval(1.0, 0.0, 1.0).unwrap();
        assert!((g1 / g0 - (-0.5f64).exp()).abs() < 1e-12);
        let g345 = gaussian_eval(3.0, 4.0, 5.0).unwrap();
        assert!((g345 - g1 / 25.0).abs() < 1e-15);
        assert!(matches!(
            gaussian_eval(0.0, 0.0, 0.0),
            Err(GridError::NonPositiveSigma(_))
        ));
        assert!(gaussian_eval(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn kernel_normalized() {
        for sigma in [0.5, 1.0, 2.0, 5.0] {
            let k = GaussianKernel::new(sigma).unwrap();
            assert_eq!(k.radius(), (3.0 * sigma).ceil() as usize);
            let r = k.radius() as isize;
            let mut total = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    total += k.weight_2d(dx, dy);
                }
            }
            assert!((total - 1.0).abs() < 1e-12, "sigma {sigma}: {total}");
            let w = k.weights();
            for i in 0..w.len() {
                assert_eq!(w[i], w[w.len() - 1 - i]);
            }
        }
    }

    #[test]
    fn blur_constant_and_identity() {
        let c = Grid2D::filled(7, 5, 0.37);
        let b = gaussian_blur(&c, 1.7).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.37).abs() < 1e-14));
        let img = Grid2D::from_fn(6, 4, |x, y| (x * 3 + y) as f64);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
    }

    #[test]
    fn blur_impulse_matches_direct_convolution() {
        let img = Grid2D::from_fn(9, 9, |x, y| if x == 4 && y == 4 { 1.0 } else { 0.0 });
        let sep = gaussian_blur(&img, 1.0).unwrap();
        let direct = brute_conv(&img, 1.0);
        for (a, b) in sep.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn sparse_blur_matches_full_blur() {
        let k = GaussianKernel::new(1.3).unwrap();
        for (cx, cy) in [(2usize, 3usize), (20, 15), (38, 28)] {
            let img = Grid2D::from_fn(40, 30, |x, y| {
                if x.abs_diff(cx) <= 2 && y.abs_diff(cy) <= 1 {
                    1.0 + (x + y) as f64 * 0.1
                } else {
                    0.0
                }
            });
            assert_eq!(gaussian_blur(&img, 1.3).unwrap(), blur_full(&img, &k));
        }
        let zeros = Grid2D::zeros(7, 5);
        assert_eq!(gaussian_blur(&zeros, 2.0).unwrap(), zeros);
    }

    #[test]
    fn blur_conserves_mass_when_padded() {
        let sigma: f64 = 1.5;
        let pad = (3.0 * sigma).ceil() as usize;
        let img = Grid2D::from_fn(10 + 2 * pad, 8 + 2 * pad, |x, y| {
            if (pad..pad + 10).contains(&x) && (pad..pad + 8).contains(&y) {
                ((x * 7 + y * 13) % 5) as f64 * 0.25
            } else {
                0.0
            }
        });
        let out = gaussian_blur(&img, sigma).unwrap();
        assert!((out.sum() - img.sum()).abs() < 1e-8);
    }

    #[test]
    fn resize_identity_and_bounds() {
        let img = Grid2D::from_fn(5, 3, |x, y| (x + 10 * y) as f64);
        assert_eq!(resize(&img, 5, 3, ResizeMode::Nearest), img);
        assert_eq!(resize(&img, 5, 3, ResizeMode::Bilinear), img);

        let two = Grid2D::new(2, 2, vec![0.0, 1.0, 0.0, 1.0], (1.0, 1.0)).unwrap();
        let out = resize(&two, 2, 4, ResizeMode::Bilinear);
        assert_eq!(out.dims(), (2, 4));
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for y in 1..4 {
            assert_eq!(out.get(0, y), out.get(0, 0));
            assert_eq!(out.get(1, y), out.get(1, 0));
        }
    }

    #[test]
    fn resize_nearest_checkerboard_blocks() {
        let board = Grid2D::from_fn(4, 4, |x, y| ((x + y) % 2) as f64);
        let up = resize(&board, 8, 8, ResizeMode::Nearest);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(up.get(x, y), board.get(x / 2, y / 2));
            }
        }
        assert_eq!(up.spacing(), (0.5, 0.5));
    }

    #[test]
    fn sigma_fit_examples() {
        let m = fit_sigma_model(&[(1.0, 0.0), (2.0, 1.0), (3.0, 2.0)]).unwrap();
        assert!((m.slope - 1.0).abs() < 1e-12);
        assert!((m.intercept + 1.0).abs() < 1e-12);
        assert!(matches!(
            fit_sigma_model(&[(2.0, 1.0), (2.0, 1.0)]),
            Err(GridError::DegenerateFit { distinct: 1 })
        ));
        assert!(fit_sigma_model(&[(2.0, 1.0)]).is_err());

        // Normal equations [[n, sx], [sx, sxx]] [b, m]^T = [sy, sxy].
        let pts = [(1.0, 0.4), (2.0, 0.9), (3.0, 1.6), (4.0, 2.1)];
        let n = 4.0;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let det = n * sxx - sx * sx;
        let slope = (n * sxy - sx * sy) / det;
        let intercept = (sxx * sy - sx * sxy) / det;
        let m = fit_sigma_model(&pts).unwrap();
        assert!((m.slope - slope).abs() < 1e-12);
        assert!((m.intercept - intercept).abs() < 1e-12);
        assert!((m.slope - 0.58).abs() < 1e-12);
        assert!((m.intercept + 0.2).abs() < 1e-12);
    }

    #[test]
    fn sigma_prediction_clamped() {
        let m = SigmaModel {
            slope: 4.0,
            intercept: -1.0,
            points: vec![],
        };
        assert_eq!(m.predict(0.0), 0.0);
        assert_eq!(m.predict(100.0), SIGMA_MAX);
        assert!((m.predict(1.0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn upscale_fixed_points() {
        let zeros = Grid2D::zeros(8, 8);
        let out = upscale_mask_smoothed(&zeros, 20, 24, &SigmaModel::default());
        assert_eq!(out.dims(), (20, 24));
        assert!(out.data().iter().all(|&v| v == 0.0));

        let mask = Grid2D::from_fn(12, 12, |x, y| ((x as i32 - 6).pow(2) + (y as i32 - 5).pow(2) <= 16) as u8 as f64);
        let same = upscale_mask_smoothed(&mask, 12, 12, &SigmaModel::constant(0.0));
        assert_eq!(same, mask);
    }
}
