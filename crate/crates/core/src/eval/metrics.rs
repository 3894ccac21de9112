use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ClassVocab;
use crate::detect::{BoundingBox, Detection};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Peak-to-peak range of `[-1, 1]` pixels.
pub const PSNR_PEAK: f64 = 2.0;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let h = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDetection {
    pub image_id: String,
    pub detection: Detection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: BoundingBox,
}

/// Indices of `dets` of one class sorted by descending confidence; ties keep input order.
fn ranked(dets: &[ImageDetection], class_id: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].detection.class_id == class_id).collect();
    idx.sort_by(|&a, &b| dets[b].detection.confidence.total_cmp(&dets[a].detection.confidence));
    idx
}

/// Greedy assignment in rank order: each detection takes the highest-IoU unmatched
/// ground truth of its image and class (ties to the lower gt index) when that IoU
/// reaches `iou_threshold`. Returns the matched gt index per ranked detection.
fn assign(dets: &[ImageDetection], order: &[usize], gts: &[GroundTruth], class_id: usize, iou_threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    order
        .iter()
        .map(|&di| {
            let d = &dets[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || g.class_id != class_id || g.image_id != d.image_id {
                    continue;
                }
                let v = iou(&g.bbox, &d.detection.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            best.map(|(gi, _)| {
                taken[gi] = true;
                gi
            })
        })
        .collect()
}

/// All-point interpolated average precision of one class.
pub fn average_precision(dets: &[ImageDetection], gts: &[GroundTruth], class_id: usize, iou_threshold: f64) -> Result<f64> {
    let npos = gts.iter().filter(|g| g.class_id == class_id).count();
    if npos == 0 {
        return Err(Error::Argument(format!("class {class_id} has no ground truth")));
    }
    let order = ranked(dets, class_id);
    let hits = assign(dets, &order, gts, class_id, iou_threshold);
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, h) in hits.iter().enumerate() {
        tp += h.is_some() as usize;
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // Precision envelope: best precision at this rank or any later one.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let ap: f64 = hits.iter().zip(&precision).filter(|(h, _)| h.is_some()).fold(0.0, |acc, (_, p)| acc + p);
    Ok(ap / npos as f64)
}

/// Ground truths recovered by `dets` (same greedy assignment as AP) over all classes.
pub fn recall(dets: &[ImageDetection], gts: &[GroundTruth], iou_threshold: f64) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::Argument("recall needs ground truth".into()));
    }
    Ok(matched_count(dets, gts, iou_threshold) as f64 / gts.len() as f64)
}

pub(crate) fn matched_count(dets: &[ImageDetection], gts: &[GroundTruth], iou_threshold: f64) -> usize {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| assign(dets, &ranked(dets, c), gts, c, iou_threshold).iter().flatten().count())
        .sum()
}

pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10() })
}

/// Serializes non-finite values as the strings `"inf"`, `"-inf"`, `"nan"`.
mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("bad number '{t}'"))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrStats {
    #[serde(with = "lenient_f64")]
    pub mean: f64,
    #[serde(with = "lenient_f64")]
    pub min: f64,
    #[serde(with = "lenient_f64")]
    pub max: f64,
}

impl PsnrStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        Some(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub seed: Option<u64>,
    pub iou_threshold: f64,
    pub conf_threshold: Option<f64>,
    pub nms_threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP per class present in the ground truth, keyed by label (or class id).
    pub per_class_ap: BTreeMap<String, f64>,
    pub map_score: f64,
    pub recall_at_iou: f64,
    pub psnr_stats: Option<PsnrStats>,
    pub fingerprint: Fingerprint,
}

/// mAP over the classes present in `gts`, plus recall at the same IoU threshold.
pub fn mean_average_precision(
    dets: &[ImageDetection],
    gts: &[GroundTruth],
    iou_threshold: f64,
    vocab: Option<&ClassVocab>,
) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::Argument("mAP needs ground truth".into()));
    }
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class_ap = BTreeMap::new();
    for &c in &classes {
        let key = vocab.and_then(|v| v.label(c)).map_or_else(|| c.to_string(), str::to_string);
        per_class_ap.insert(key, average_precision(dets, gts, c, iou_threshold)?);
    }
    let map_score = per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64;
    Ok(EvalReport {
        per_class_ap,
        map_score,
        recall_at_iou: recall(dets, gts, iou_threshold)?,
        psnr_stats: None,
        fingerprint: Fingerprint { iou_threshold, ..Fingerprint::default() },
    })
}
