//! Normalized page geometry: bounding boxes, containment, IoU.
//!
//! All boxes live in a fixed integer page space of 700 width units by 1000
//! height units, proportioned like an A4 page. Raw OCR coordinates are mapped
//! into this space once at ingestion and every later stage works in it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum x coordinate in the normalized page space.
pub const PAGE_WIDTH_UNITS: u32 = 700;
/// Maximum y coordinate in the normalized page space.
pub const PAGE_HEIGHT_UNITS: u32 = 1000;

/// Axis-aligned rectangle in normalized page units.
///
/// Invariants: `x0 <= x1`, `y0 <= y1`, `x` in `[0, 700]`, `y` in `[0, 1000]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box coordinates out of order or out of range: ({0}, {1}, {2}, {3})")]
    InvalidBox(u32, u32, u32, u32),
    #[error("raw coordinate is not finite")]
    NonFinite,
    #[error("raw coordinate is negative")]
    Negative,
    #[error("raw box ({x0}, {y0}, {x1}, {y1}) is out of order or exceeds page {w}x{h}")]
    RawOutOfBounds {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        w: f64,
        h: f64,
    },
    #[error("page dimensions must be positive, got {0}x{1}")]
    BadPage(f64, f64),
}

impl BBox {
    /// Validated constructor.
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<BBox, GeometryError> {
        if x0 > x1 || y0 > y1 || x1 > PAGE_WIDTH_UNITS || y1 > PAGE_HEIGHT_UNITS {
            return Err(GeometryError::InvalidBox(x0, y0, x1, y1));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    /// The all-zero box used for query and special positions.
    pub const fn sentinel() -> BBox {
        BBox {
            x0: 0,
            y0: 0,
            x1: 0,
            y1: 0,
        }
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> i64 {
        i64::from(self.width()) * i64::from(self.height())
    }

    /// Geometric center; half-integers are exact in `f64`.
    pub fn center(&self) -> CenterPoint {
        CenterPoint {
            cx: f64::from(self.x0 + self.x1) / 2.0,
            cy: f64::from(self.y0 + self.y1) / 2.0,
        }
    }
}

/// Center of a token box in normalized units; coordinates may be
/// half-integers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterPoint {
    pub cx: f64,
    pub cy: f64,
}

impl CenterPoint {
    /// Placeholder center for positions without layout (query/special).
    pub const fn sentinel() -> CenterPoint {
        CenterPoint { cx: 0.0, cy: 0.0 }
    }
}

/// A rectangle in raw page units as produced by an OCR engine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Maps a raw-coordinate rectangle into the normalized page space.
///
/// Each coordinate is scaled by `700 / page_width` (x) or `1000 / page_height`
/// (y) and rounded half-up. If rounding inverts a degenerate extent the upper
/// coordinate is clamped down to the lower one.
pub fn normalize_bbox(raw: RawBox, page_width: f64, page_height: f64) -> Result<BBox, GeometryError> {
    if !(page_width.is_finite() && page_height.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    if page_width <= 0.0 || page_height <= 0.0 {
        return Err(GeometryError::BadPage(page_width, page_height));
    }
    let coords = [raw.x0, raw.y0, raw.x1, raw.y1];
    if coords.iter().any(|c| !c.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    if coords.iter().any(|&c| c < 0.0) {
        return Err(GeometryError::Negative);
    }
    if raw.x0 > raw.x1 || raw.y0 > raw.y1 || raw.x1 > page_width || raw.y1 > page_height {
        return Err(GeometryError::RawOutOfBounds {
            x0: raw.x0,
            y0: raw.y0,
            x1: raw.x1,
            y1: raw.y1,
            w: page_width,
            h: page_height,
        });
    }

    let sx = |v: f64| (v / page_width * f64::from(PAGE_WIDTH_UNITS)).round() as u32;
    let sy = |v: f64| (v / page_height * f64::from(PAGE_HEIGHT_UNITS)).round() as u32;
    let x0 = sx(raw.x0);
    let y0 = sy(raw.y0);
    let mut x1 = sx(raw.x1);
    let mut y1 = sy(raw.y1);
    // Rounding can only invert a degenerate extent; clamp to the lower edge.
    if x1 < x0 {
        x1 = x0;
    }
    if y1 < y0 {
        y1 = y0;
    }
    BBox::new(x0, y0, x1, y1)
}

/// Whether `token` lies fully inside `region`, boundary inclusive.
pub fn token_in_region(token: &BBox, region: &BBox) -> bool {
    region.x0 <= token.x0 && region.x1 >= token.x1 && region.y0 <= token.y0 && region.y1 >= token.y1
}

/// A rectangle assembled from four boundary-token boxes; may be inverted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateRegion {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    /// False when `x0 > x1` or `y0 > y1`.
    pub valid: bool,
}

impl CandidateRegion {
    /// The proper `BBox` when the extents are ordered.
    pub fn bbox(&self) -> Option<BBox> {
        if self.valid {
            Some(BBox {
                x0: self.x0,
                y0: self.y0,
                x1: self.x1,
                y1: self.y1,
            })
        } else {
            None
        }
    }
}

/// Builds a region from the boxes of its left, top, right and bottom boundary
/// tokens: `(left.x0, top.y0, right.x1, bottom.y1)`. Inverted extents are
/// flagged rather than rejected.
pub fn region_from_boundary_boxes(
    left: &BBox,
    top: &BBox,
    right: &BBox,
    bottom: &BBox,
) -> CandidateRegion {
    let (x0, y0, x1, y1) = (left.x0, top.y0, right.x1, bottom.y1);
    CandidateRegion {
        x0,
        y0,
        x1,
        y1,
        valid: x0 <= x1 && y0 <= y1,
    }
}

/// Intersection over union of two boxes.
///
/// Degenerate case: when both boxes have zero area the result is 1 for
/// identical boxes and 0 otherwise, which keeps `iou(a, a) == 1` universally.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = i64::from(a.x1.min(b.x1)) - i64::from(a.x0.max(b.x0));
    let iy = i64::from(a.y1.min(b.y1)) - i64::from(a.y0.max(b.y0));
    let inter = if ix > 0 && iy > 0 { ix * iy } else { 0 };
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter as f64 / union as f64
}
