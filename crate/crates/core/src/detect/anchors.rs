use serde::{Deserialize, Serialize};

use super::BoundingBox;
use crate::error::{Error, Result};

/// Aspect ratios handed out, in order, by [`MapSpec::with_aspect_count`].
pub const ASPECT_LADDER: [f64; 9] = [1.0, 2.0, 0.5, 3.0, 1.0 / 3.0, 1.5, 2.0 / 3.0, 4.0, 0.25];

/// One feature map of the detector: its grid and the aspect ratios placed per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    pub rows: usize,
    pub cols: usize,
    pub aspects: Vec<f64>,
}

impl MapSpec {
    /// Grid with the first `n` ratios of [`ASPECT_LADDER`].
    pub fn with_aspect_count(rows: usize, cols: usize, n: usize) -> Result<Self> {
        if n == 0 || n > ASPECT_LADDER.len() {
            return Err(Error::Argument(format!(
                "aspect count {n} outside 1..={}",
                ASPECT_LADDER.len()
            )));
        }
        Ok(Self { rows, cols, aspects: ASPECT_LADDER[..n].to_vec() })
    }

    pub fn anchor_count(&self) -> usize {
        self.rows * self.cols * self.aspects.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorOrigin {
    pub map: usize,
    pub row: usize,
    pub col: usize,
    pub aspect: usize,
}

/// Default boxes over all maps, ordered by map, row, column, aspect.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<BoundingBox>,
    pub origins: Vec<AnchorOrigin>,
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<Vec<f64>>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Scale of map `k` (0-based) of `m`, linear from `s_min` to `s_max`.
pub fn map_scale(k: usize, m: usize, s_min: f64, s_max: f64) -> f64 {
    if m == 1 {
        s_min
    } else {
        s_min + (s_max - s_min) * k as f64 / (m - 1) as f64
    }
}

pub fn build_default_boxes(specs: &[MapSpec], s_min: f64, s_max: f64) -> Result<AnchorSet> {
    if specs.is_empty() {
        return Err(Error::Argument("at least one feature map is required".into()));
    }
    if !(0.0 < s_min && s_min < s_max && s_max < 1.0) {
        return Err(Error::Argument(format!(
            "scale range ({s_min}, {s_max}) must satisfy 0 < s_min < s_max < 1"
        )));
    }
    if let Some(bad) = specs
        .iter()
        .find(|s| s.rows == 0 || s.cols == 0 || s.aspects.is_empty() || s.aspects.iter().any(|a| !(*a > 0.0)))
    {
        return Err(Error::Argument(format!("invalid map spec {bad:?}")));
    }
    let m = specs.len();
    let mut set = AnchorSet {
        boxes: Vec::with_capacity(specs.iter().map(MapSpec::anchor_count).sum()),
        origins: Vec::new(),
        scales: Vec::with_capacity(m),
        aspect_ratios: Vec::with_capacity(m),
    };
    for (k, spec) in specs.iter().enumerate() {
        let s = map_scale(k, m, s_min, s_max);
        set.scales.push(s);
        set.aspect_ratios.push(spec.aspects.clone());
        for row in 0..spec.rows {
            let cy = (row as f64 + 0.5) / spec.rows as f64;
            for col in 0..spec.cols {
                let cx = (col as f64 + 0.5) / spec.cols as f64;
                for (ai, &a) in spec.aspects.iter().enumerate() {
                    let b = BoundingBox::from_center(cx, cy, s * a.sqrt(), s / a.sqrt())?;
                    set.boxes.push(b);
                    set.origins.push(AnchorOrigin { map: k, row, col, aspect: ai });
                }
            }
        }
    }
    Ok(set)
}
