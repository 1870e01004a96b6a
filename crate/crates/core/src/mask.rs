//! Label-mask algebra and localization-region geometry.

use crate::grid::Grid2D;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MaskError {
    #[error("label {value} at ({x}, {y}) is not one of 0..=3")]
    InvalidLabel { x: usize, y: usize, value: f64 },
    #[error("value {value} at ({x}, {y}) is not binary")]
    NotBinary { x: usize, y: usize, value: f64 },
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("region [{x0},{x1})x[{y0},{y1}) is invalid for bounds {width}x{height}")]
    InvalidRegion {
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        width: usize,
        height: usize,
    },
}

pub type Result<T> = std::result::Result<T, MaskError>;

/// Heart structures, with their ACDC label codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Structure {
    #[serde(rename = "RV")]
    Rv,
    #[serde(rename = "MYO")]
    Myo,
    #[serde(rename = "LV")]
    Lv,
}

impl Structure {
    /// Processing order.
    pub const ALL: [Structure; 3] = [Structure::Rv, Structure::Myo, Structure::Lv];

    pub fn code(self) -> u8 {
        match self {
            Structure::Rv => 1,
            Structure::Myo => 2,
            Structure::Lv => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Structure::Rv),
            2 => Some(Structure::Myo),
            3 => Some(Structure::Lv),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Structure::Rv => "RV",
            Structure::Myo => "MYO",
            Structure::Lv => "LV",
        }
    }

    pub fn index(self) -> usize {
        self.code() as usize - 1
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Structure {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "RV" => Ok(Structure::Rv),
            "MYO" => Ok(Structure::Myo),
            "LV" => Ok(Structure::Lv),
            other => Err(format!("unknown structure `{other}`")),
        }
    }
}

/// Multi-class map with values in {0 = background, 1 = RV, 2 = MYO, 3 = LV}.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    grid: Grid2D,
}

impl LabelMask {
    pub fn new(grid: Grid2D) -> Result<Self> {
        for y in 0..grid.height() {
            for x in 0..grid.width() {
                let v = grid.get(x, y);
                if !(v == 0.0 || v == 1.0 || v == 2.0 || v == 3.0) {
                    return Err(MaskError::InvalidLabel { x, y, value: v });
                }
            }
        }
        Ok(Self { grid })
    }

    pub fn background(width: usize, height: usize) -> Self {
        Self {
            grid: Grid2D::zeros(width, height),
        }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn into_grid(self) -> Grid2D {
        self.grid
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }

    pub fn label(&self, x: usize, y: usize) -> u8 {
        self.grid.get(x, y) as u8
    }

    /// Pixel counts for labels 0..=3.
    pub fn histogram(&self) -> [usize; 4] {
        let mut h = [0; 4];
        for &v in self.grid.data() {
            h[v as usize] += 1;
        }
        h
    }

    pub fn structure(&self, s: Structure) -> BinaryMask {
        let code = s.code() as f64;
        BinaryMask {
            grid: self.grid.map(|v| if v == code { 1.0 } else { 0.0 }),
            structure: s,
        }
    }
}

/// Single-structure mask with values in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    grid: Grid2D,
    structure: Structure,
}

impl BinaryMask {
    pub fn new(grid: Grid2D, structure: Structure) -> Result<Self> {
        for y in 0..grid.height() {
            for x in 0..grid.width() {
                let v = grid.get(x, y);
                if v != 0.0 && v != 1.0 {
                    return Err(MaskError::NotBinary { x, y, value: v });
                }
            }
        }
        Ok(Self { grid, structure })
    }

    /// Binarizes a probability map at `threshold` (values `>= threshold` become 1).
    pub fn from_probability(map: &Grid2D, threshold: f64, structure: Structure) -> Self {
        Self {
            grid: map.threshold(threshold),
            structure,
        }
    }

    pub fn empty(width: usize, height: usize, structure: Structure) -> Self {
        Self {
            grid: Grid2D::zeros(width, height),
            structure,
        }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn into_grid(self) -> Grid2D {
        self.grid
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }

    pub fn is_set(&self, x: usize, y: usize) -> bool {
        self.grid.get(x, y) != 0.0
    }

    pub fn count(&self) -> usize {
        self.grid.data().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Splits a label map into RV, MYO and LV binary masks.
pub fn decompose(mask: &LabelMask) -> [BinaryMask; 3] {
    Structure::ALL.map(|s| mask.structure(s))
}

/// Merges binary masks into a label map. Overlaps resolve LV > MYO > RV.
pub fn recompose(rv: &BinaryMask, myo: &BinaryMask, lv: &BinaryMask) -> Result<LabelMask> {
    let dims = rv.dims();
    for m in [myo, lv] {
        if m.dims() != dims {
            return Err(MaskError::DimensionMismatch(dims, m.dims()));
        }
    }
    let (w, h) = dims;
    let grid = Grid2D::from_fn(w, h, |x, y| {
        if lv.is_set(x, y) {
            3.0
        } else if myo.is_set(x, y) {
            2.0
        } else if rv.is_set(x, y) {
            1.0
        } else {
            0.0
        }
    })
    .with_spacing(rv.grid.spacing())
    .expect("spacing taken from a valid grid");
    Ok(LabelMask { grid })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionProvenance {
    RawBbox,
    Framed,
    AspectAdjusted,
}

/// Axis-aligned rectangle `[x0, x1) x [y0, y1)` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub provenance: RegionProvenance,
}

impl Region {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize, bounds: (usize, usize)) -> Result<Self> {
        if x0 < x1 && x1 <= bounds.0 && y0 < y1 && y1 <= bounds.1 {
            Ok(Self {
                x0,
                y0,
                x1,
                y1,
                provenance: RegionProvenance::RawBbox,
            })
        } else {
            Err(MaskError::InvalidRegion {
                x0,
                y0,
                x1,
                y1,
                width: bounds.0,
                height: bounds.1,
            })
        }
    }

    /// The whole image.
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
            provenance: RegionProvenance::RawBbox,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn aspect(&self) -> f64 {
        self.width() as f64 / self.height() as f64
    }

    pub fn contains_point(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn contains(&self, other: &Region) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn union(&self, other: &Region) -> Region {
        Region {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
            provenance: self.provenance,
        }
    }

    pub fn is_valid_in(&self, bounds: (usize, usize)) -> bool {
        self.x0 < self.x1 && self.x1 <= bounds.0 && self.y0 < self.y1 && self.y1 <= bounds.1
    }
}

/// Tightest rectangle around the set pixels, or `None` for an empty mask.
pub fn bbox(mask: &BinaryMask) -> Option<Region> {
    let (w, h) = mask.dims();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.is_set(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then_some(Region {
        x0,
        y0,
        x1,
        y1,
        provenance: RegionProvenance::RawBbox,
    })
}

const ROUND_EPS: f64 = 1e-9;

/// Grows `[lo, hi)` by `extra` pixels split evenly, the odd pixel going to `hi`.
fn grow_symmetric(lo: i64, hi: i64, extra: i64) -> (i64, i64) {
    let before = extra / 2;
    (lo - before, hi + (extra - before))
}

/// Moves `[lo, hi)` inside `[0, limit)` without resizing; clamps if it is longer.
fn fit_axis(lo: i64, hi: i64, limit: i64) -> (i64, i64) {
    let len = hi - lo;
    if len >= limit {
        return (0, limit);
    }
    if lo < 0 {
        (0, len)
    } else if hi > limit {
        (limit - len, limit)
    } else {
        (lo, hi)
    }
}

/// Shrinks `[lo, hi)` toward `target_len` around its center without cutting
/// into `[keep_lo, keep_hi)`.
fn shrink_axis(lo: i64, hi: i64, target_len: i64, keep_lo: i64, keep_hi: i64) -> (i64, i64) {
    let mut excess = (hi - lo) - target_len.max(keep_hi - keep_lo);
    let (mut lo, mut hi) = (lo, hi);
    while excess > 0 {
        let room_lo = keep_lo - lo;
        let room_hi = hi - keep_hi;
        if room_lo <= 0 && room_hi <= 0 {
            break;
        }
        if room_lo >= room_hi {
            lo += 1;
        } else {
            hi -= 1;
        }
        excess -= 1;
    }
    (lo, hi)
}

/// Frames a localization box: expands each side by `margin` of that side's
/// length (rounded outward), grows the short axis symmetrically toward
/// `target_aspect` (width / height), then fits the result into `bounds`.
///
/// Fitting first translates the region back inside the image. Only when the
/// region is larger than the image on one axis is it clamped there, and the
/// other axis is then shrunk toward the target aspect without cutting into
/// the input region.
pub fn frame_region(r: &Region, margin: f64, target_aspect: f64, bounds: (usize, usize)) -> Region {
    let (bw, bh) = (bounds.0 as i64, bounds.1 as i64);
    let (w, h) = (r.width() as f64, r.height() as f64);
    let mx = margin * w;
    let my = margin * h;
    let mut x0 = (r.x0 as f64 - mx + ROUND_EPS).floor() as i64;
    let mut x1 = (r.x1 as f64 + mx - ROUND_EPS).ceil() as i64;
    let mut y0 = (r.y0 as f64 - my + ROUND_EPS).floor() as i64;
    let mut y1 = (r.y1 as f64 + my - ROUND_EPS).ceil() as i64;

    let (fw, fh) = ((x1 - x0) as f64, (y1 - y0) as f64);
    if target_aspect > 0.0 && target_aspect.is_finite() {
        if fw < target_aspect * fh {
            let want = (target_aspect * fh - ROUND_EPS).ceil() as i64;
            (x0, x1) = grow_symmetric(x0, x1, want - (x1 - x0));
        } else {
            let want = (fw / target_aspect - ROUND_EPS).ceil() as i64;
            (y0, y1) = grow_symmetric(y0, y1, want - (y1 - y0));
        }
    }

    let clamped_x = x1 - x0 > bw;
    let clamped_y = y1 - y0 > bh;
    (x0, x1) = fit_axis(x0, x1, bw);
    (y0, y1) = fit_axis(y0, y1, bh);
    if target_aspect > 0.0 && target_aspect.is_finite() {
        if clamped_x && !clamped_y {
            let want = ((x1 - x0) as f64 / target_aspect).round() as i64;
            (y0, y1) = shrink_axis(y0, y1, want, r.y0 as i64, r.y1 as i64);
        } else if clamped_y && !clamped_x {
            let want = ((y1 - y0) as f64 * target_aspect).round() as i64;
            (x0, x1) = shrink_axis(x0, x1, want, r.x0 as i64, r.x1 as i64);
        }
    }

    Region {
        x0: x0 as usize,
        y0: y0 as usize,
        x1: x1 as usize,
        y1: y1 as usize,
        provenance: RegionProvenance::AspectAdjusted,
    }
}

fn morph(mask: &BinaryMask, radius: usize, dilate: bool) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    let r = radius as isize;
    let src = mask.grid();
    // Separable square structuring element: max (dilate) or min (erode) per axis.
    let pass = |get: &dyn Fn(isize, isize) -> f64, horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = if dilate { 0.0 } else { 1.0 };
                for d in -r..=r {
                    let (xx, yy) = if horizontal { (x + d, y) } else { (x, y + d) };
                    let v = get(xx, yy);
                    acc = if dilate { f64::max(acc, v) } else { f64::min(acc, v) };
                }
                out[y as usize * w + x as usize] = acc;
            }
        }
        out
    };
    let first = pass(&|x, y| src.get_clamped(x, y), true);
    let first_ref = &first;
    let second = pass(
        &|x, y| {
            let xc = x.clamp(0, w as isize - 1) as usize;
            let yc = y.clamp(0, h as isize - 1) as usize;
            first_ref[yc * w + xc]
        },
        false,
    );
    let grid = Grid2D::new(w, h, second, src.spacing()).expect("same dims as input");
    BinaryMask {
        grid,
        structure: mask.structure,
    }
}

/// Binary dilation with a `(2r+1)^2` square.
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    morph(mask, radius, true)
}

/// Binary erosion with a `(2r+1)^2` square; the border is edge-replicated.
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    morph(mask, radius, false)
}
