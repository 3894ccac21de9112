use super::{encode_box, BoundingBox};
use crate::error::{Error, Result};
use crate::eval::iou;

/// Anchor assignment produced by [`match_anchors`].
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Ground-truth index per anchor, `None` for background.
    pub anchor_to_gt: Vec<Option<usize>>,
    /// Encoded regression targets of matched anchors.
    pub anchor_offsets: Vec<Option<[f64; 4]>>,
}

impl MatchResult {
    pub fn positives(&self) -> usize {
        self.anchor_to_gt.iter().flatten().count()
    }

    /// Per-anchor class labels (0 = background) given the class id of every gt.
    pub fn targets(&self, gt_classes: &[usize]) -> DetectionTargets {
        DetectionTargets {
            labels: self.anchor_to_gt.iter().map(|m| m.map_or(0, |g| gt_classes[g])).collect(),
            offsets: self.anchor_offsets.iter().map(|o| o.unwrap_or([0.0; 4])).collect(),
        }
    }
}

/// Training targets for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets {
    pub labels: Vec<usize>,
    pub offsets: Vec<[f64; 4]>,
}

/// Two-stage matching: every ground truth first claims its best still-unclaimed
/// anchor (gts in index order, IoU ties to the lowest anchor index); every other
/// anchor whose best IoU reaches `iou_threshold` goes to that best gt (ties to the
/// lowest gt index).
pub fn match_anchors(gts: &[BoundingBox], anchors: &[BoundingBox], iou_threshold: f64) -> Result<MatchResult> {
    if anchors.is_empty() {
        return Err(Error::Argument("no anchors to match against".into()));
    }
    let mut assign: Vec<Option<usize>> = vec![None; anchors.len()];
    for (g, gt) in gts.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (a, anchor) in anchors.iter().enumerate() {
            if assign[a].is_some() {
                continue;
            }
            let v = iou(gt, anchor);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((a, v));
            }
        }
        if let Some((a, _)) = best {
            assign[a] = Some(g);
        }
    }
    if !gts.is_empty() {
        for (a, anchor) in anchors.iter().enumerate() {
            if assign[a].is_some() {
                continue;
            }
            let (g, v) = gts
                .iter()
                .enumerate()
                .map(|(g, gt)| (g, iou(gt, anchor)))
                .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            if v >= iou_threshold {
                assign[a] = Some(g);
            }
        }
    }
    let anchor_offsets = assign
        .iter()
        .zip(anchors)
        .map(|(m, anchor)| m.map(|g| encode_box(&gts[g], anchor)).transpose())
        .collect::<Result<_>>()?;
    Ok(MatchResult { anchor_to_gt: assign, anchor_offsets })
}
