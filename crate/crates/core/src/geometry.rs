//! Axis-aligned box arithmetic.
//!
//! Boxes are continuous `[x1, x2] × [y1, y2]` rectangles in pixel units with the
//! origin at the top-left corner. Areas are `(x2 - x1) * (y2 - y1)`, without the
//! `+1` pixel convention used by some VOC tooling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An axis-aligned rectangle. Zero-width or zero-height boxes are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting inverted or non-finite corners.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Input(format!("non-finite box coordinates {self:?}")));
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::Input(format!(
                "box corners out of order (need x1 <= x2 and y1 <= y2): {self:?}"
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Square box of side `size` centred on `(cx, cy)`, clipped to `[0, w] × [0, h]`.
    pub fn centered(cx: f64, cy: f64, size: f64, w: f64, h: f64) -> BBox {
        let half = size / 2.0;
        BBox {
            x1: (cx - half).clamp(0.0, w),
            y1: (cy - half).clamp(0.0, h),
            x2: (cx + half).clamp(0.0, w),
            y2: (cy + half).clamp(0.0, h),
        }
    }
}

/// A labelled box with a raw detector confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub label: i64,
    pub bbox: BBox,
    pub score: f64,
}

pub fn area(b: &BBox) -> f64 {
    b.area()
}

pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Fraction of `b_j` covered by `b_k`, i.e. `|b_j ∩ b_k| / |b_j|`.
///
/// Not symmetric. Returns 0 when `b_j` has zero area.
pub fn overlap_over_self(b_j: &BBox, b_k: &BBox) -> f64 {
    let own = b_j.area();
    if own <= 0.0 {
        0.0
    } else {
        intersection_area(b_j, b_k) / own
    }
}
