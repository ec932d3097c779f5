//! Axis-aligned boxes in normalized image coordinates, point annotations and
//! the point-relative offset codec.
//!
//! All coordinates are normalized to `[0, 1]`, boxes are stored in corner form
//! `(x1, y1, x2, y2)`. A box with zero width or height is *degenerate*; by
//! convention its IoU with anything is `0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): corners must be ordered and finite")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("point ({x}, {y}) lies outside box ({x1}, {y1}, {x2}, {y2})")]
    PointOutsideBox {
        x: f64,
        y: f64,
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
    },
    #[error("invalid offsets ({l}, {t}, {r}, {b}): each must lie in [0, 1]")]
    InvalidOffsets { l: f64, t: f64, r: f64, b: f64 },
}

/// Axis-aligned rectangle in normalized corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Checked constructor: corners must be finite and ordered.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let ok = [x1, y1, x2, y2].iter().all(|v| v.is_finite()) && x1 <= x2 && y1 <= y2;
        if !ok {
            return Err(GeometryError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from center/size form, clamped to the canvas.
    pub fn from_cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        let w = w.max(0.0);
        let h = h.max(0.0);
        Self {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
        .clamped()
    }

    /// Corners clamped to the canvas; a reversed pair collapses to its mean.
    pub fn from_corners_clamped(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        let order = |a: f64, b: f64| if a <= b { (a, b) } else { let m = 0.5 * (a + b); (m, m) };
        let (x1, x2) = order(x1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0));
        let (y1, y2) = order(y1.clamp(0.0, 1.0), y2.clamp(0.0, 1.0));
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    /// Inclusive containment test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn clamped(&self) -> Self {
        Self {
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
            x2: self.x2.clamp(0.0, 1.0),
            y2: self.y2.clamp(0.0, 1.0),
        }
    }

    /// Mirror around the vertical center line of the canvas.
    pub fn hflipped(&self) -> Self {
        Self {
            x1: 1.0 - self.x2,
            y1: self.y1,
            x2: 1.0 - self.x1,
            y2: self.y2,
        }
    }

    /// Smallest box containing both.
    pub fn enclosing(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Pixel-space `[x, y, w, h]` for a square canvas of `size` pixels.
    pub fn to_xywh_pixels(&self, size: usize) -> [f64; 4] {
        let s = size as f64;
        [self.x1 * s, self.y1 * s, self.width() * s, self.height() * s]
    }

    pub fn from_xywh_pixels(xywh: [f64; 4], size: usize) -> Result<Self, GeometryError> {
        let s = size as f64;
        let [x, y, w, h] = xywh;
        BBox::new(x / s, y / s, (x + w) / s, (y + h) / s)
    }
}

/// A labeled point `(x, y, category)` lying on an object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub x: f64,
    pub y: f64,
    pub category: usize,
}

impl PointAnnotation {
    pub fn new(x: f64, y: f64, category: usize) -> Self {
        Self { x, y, category }
    }

    pub fn hflipped(&self) -> Self {
        Self {
            x: 1.0 - self.x,
            ..*self
        }
    }
}

/// Distances from a point to the left, top, right and bottom box sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetQuad {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl OffsetQuad {
    pub fn new(l: f64, t: f64, r: f64, b: f64) -> Result<Self, GeometryError> {
        if [l, t, r, b].iter().all(|v| (0.0..=1.0).contains(v)) {
            Ok(Self { l, t, r, b })
        } else {
            Err(GeometryError::InvalidOffsets { l, t, r, b })
        }
    }
}

/// Intersection over union. Degenerate boxes score `0`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - |C \ (a ∪ b)| / |C|` with `C` the enclosing box.
///
/// When the enclosing box itself has zero area the penalty term is dropped and
/// the value equals `iou` (which is `0` for degenerate inputs).
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let base = iou(a, b);
    let enclosing = a.enclosing(b).area();
    if enclosing <= 0.0 {
        return base;
    }
    let union = a.area() + b.area() - a.intersection_area(b);
    base - (enclosing - union).max(0.0) / enclosing
}

/// Reconstructs a box from a point and its side offsets, clamped to the canvas.
pub fn decode_offsets(p: &PointAnnotation, d: &OffsetQuad) -> BBox {
    BBox {
        x1: p.x - d.l,
        y1: p.y - d.t,
        x2: p.x + d.r,
        y2: p.y + d.b,
    }
    .clamped()
}

/// Side offsets of `bbox` relative to a point that must lie inside it.
pub fn encode_offsets(p: &PointAnnotation, bbox: &BBox) -> Result<OffsetQuad, GeometryError> {
    if !bbox.contains(p.x, p.y) {
        return Err(GeometryError::PointOutsideBox {
            x: p.x,
            y: p.y,
            x1: bbox.x1,
            y1: bbox.y1,
            x2: bbox.x2,
            y2: bbox.y2,
        });
    }
    Ok(OffsetQuad {
        l: p.x - bbox.x1,
        t: p.y - bbox.y1,
        r: bbox.x2 - p.x,
        b: bbox.y2 - p.y,
    })
}
