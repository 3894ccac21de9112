use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Corner-format box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BoundingBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let ok = [xmin, ymin, xmax, ymax].iter().all(|v| (0.0..=1.0).contains(v)) && xmin < xmax && ymin < ymax;
        if !ok {
            return Err(Error::Validation(format!(
                "invalid box [{xmin}, {ymin}, {xmax}, {ymax}]"
            )));
        }
        Ok(Self { xmin, ymin, xmax, ymax })
    }

    /// Box from center/size, clipped to the unit square.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let clip = |v: f64| v.clamp(0.0, 1.0);
        Self::new(clip(cx - w / 2.0), clip(cy - h / 2.0), clip(cx + w / 2.0), clip(cy + h / 2.0))
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.xmin + self.xmax) * 0.5, (self.ymin + self.ymax) * 0.5)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }
}

/// A detected object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    /// 1-based class id; 0 is reserved for background.
    pub class_id: usize,
    pub confidence: f64,
}

/// Regression target of `gt` relative to `anchor`: `(dcx, dcy, dw, dh)`.
pub fn encode_box(gt: &BoundingBox, anchor: &BoundingBox) -> Result<[f64; 4]> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(Error::Numeric(format!("anchor {anchor:?} has zero extent")));
    }
    let (gcx, gcy) = gt.center();
    let (acx, acy) = anchor.center();
    Ok([
        (gcx - acx) / aw,
        (gcy - acy) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ])
}

/// Inverse of [`encode_box`]; the decoded box is clipped to the unit square.
pub fn decode_box(offsets: &[f64; 4], anchor: &BoundingBox) -> Result<BoundingBox> {
    if offsets.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite offsets {offsets:?}")));
    }
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = acx + offsets[0] * aw;
    let cy = acy + offsets[1] * ah;
    let w = aw * offsets[2].exp();
    let h = ah * offsets[3].exp();
    if !(w.is_finite() && h.is_finite()) {
        return Err(Error::Numeric(format!("offsets {offsets:?} overflow")));
    }
    BoundingBox::from_center(cx, cy, w, h).map_err(|_| Error::Numeric(format!("decoded box {offsets:?} collapses after clipping")))
}
