//! Axis-aligned boxes in pixel coordinates: overlap, and the center/size
//! delta encoding used by the regression head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corner-convention box; always satisfies `x2 > x1`, `y2 > y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Box> {
        let b = Box { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::shape(format!(
                "degenerate box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x2 > self.x1
            && self.y2 > self.y1
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
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Build from center point and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Box> {
        Box::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }
}

/// Intersection over union; 0 for disjoint boxes, 1 for identical ones.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Deltas `(tx, ty, tw, th)` carrying `anchor` onto `gt`:
/// center offsets in units of the anchor size, log size ratios.
pub fn encode_box(anchor: &Box, gt: &Box) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    [
        (gx - ax) / anchor.width(),
        (gy - ay) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ]
}

/// Invert [`encode_box`] and clip to `[0, W] x [0, H]`. Boxes that clip to
/// zero area come back as `None` so callers can drop them.
pub fn decode_box(
    anchor: &Box,
    deltas: [f64; 4],
    image_extent: (f64, f64),
) -> Result<Option<Box>> {
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidDelta);
    }
    let [tx, ty, tw, th] = deltas;
    let (ax, ay) = anchor.center();
    let cx = ax + tx * anchor.width();
    let cy = ay + ty * anchor.height();
    let w = anchor.width() * tw.exp();
    let h = anchor.height() * th.exp();
    let (iw, ih) = image_extent;
    let x1 = (cx - 0.5 * w).clamp(0.0, iw);
    let y1 = (cy - 0.5 * h).clamp(0.0, ih);
    let x2 = (cx + 0.5 * w).clamp(0.0, iw);
    let y2 = (cy + 0.5 * h).clamp(0.0, ih);
    if x2 > x1 && y2 > y1 {
        Ok(Some(Box { x1, y1, x2, y2 }))
    } else {
        Ok(None)
    }
}
