//! Axis-aligned boxes in continuous image coordinates, plus IoU and the
//! delta parameterization used by the detector's regression heads.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `(x1, y1, x2, y2)` with `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2
            && self.y1 < self.y2
            && [self.x1, self.y1, self.x2, self.y2]
                .iter()
                .all(|v| v.is_finite())
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

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Clip to `[0, size] × [0, size]`. May produce a degenerate box.
    pub fn clip(&self, size: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, size),
            y1: self.y1.clamp(0.0, size),
            x2: self.x2.clamp(0.0, size),
            y2: self.y2.clamp(0.0, size),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

/// Intersection-over-union of two boxes, continuous coordinates.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return Err(Error::invalid("iou of a degenerate box"));
    }
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// Encode `target` relative to `anchor` as `(tx, ty, tw, th)`.
pub fn encode_deltas(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    [
        (tcx - acx) / anchor.width(),
        (tcy - acy) / anchor.height(),
        (target.width() / anchor.width()).ln(),
        (target.height() / anchor.height()).ln(),
    ]
}

/// Apply `(tx, ty, tw, th)` to `anchor`. Log-scale terms are clamped so a
/// wild regression output cannot overflow to infinity.
pub fn decode_deltas(anchor: &BBox, deltas: &[f64; 4]) -> BBox {
    const LOG_CLAMP: f64 = 4.0;
    let (acx, acy) = anchor.center();
    let cx = acx + deltas[0] * anchor.width();
    let cy = acy + deltas[1] * anchor.height();
    let w = anchor.width() * deltas[2].clamp(-LOG_CLAMP, LOG_CLAMP).exp();
    let h = anchor.height() * deltas[3].clamp(-LOG_CLAMP, LOG_CLAMP).exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}
