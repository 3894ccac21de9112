use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{matched_count, mean_average_precision, EvalReport, Fingerprint, GroundTruth, ImageDetection};
use crate::data::Annotation;
use crate::detect::{detect, detect_cascade, ground_truth, Detection, Detector, NMS_IOU};
use crate::enhance::EnhanceSpec;
use crate::error::{Error, Result};
use crate::gan::Generator;
use crate::image::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub conf: f64,
    pub iou: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { conf: 0.5, iou: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecall {
    pub image_id: String,
    pub ground_truths: usize,
    pub baseline_hits: usize,
    pub cascade_hits: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: EvalReport,
    pub cascade: EvalReport,
    pub delta_recall: f64,
    pub delta_map: f64,
    pub per_image: Vec<ImageRecall>,
}

impl Comparison {
    /// `image,ground_truths,baseline_recall,cascade_recall`; recall is empty for
    /// images without ground truth.
    pub fn per_image_csv(&self) -> String {
        let mut out = String::from("image,ground_truths,baseline_recall,cascade_recall\n");
        for r in &self.per_image {
            let rec = |hits: usize| {
                if r.ground_truths == 0 {
                    String::new()
                } else {
                    format!("{}", hits as f64 / r.ground_truths as f64)
                }
            };
            let _ = writeln!(out, "{},{},{},{}", r.image_id, r.ground_truths, rec(r.baseline_hits), rec(r.cascade_hits));
        }
        out
    }

    pub fn write_per_image_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.per_image_csv()).map_err(|e| Error::io(path, e))
    }
}

fn tag(image_id: &str, dets: Vec<Detection>) -> Vec<ImageDetection> {
    dets.into_iter().map(|detection| ImageDetection { image_id: image_id.to_string(), detection }).collect()
}

/// Runs the detector on each frame directly and after enhancement, and scores both.
pub fn compare_pipelines(
    d: &Detector,
    g: &Generator<f32>,
    test_set: &[(ImageTensor, Annotation)],
    spec: &EnhanceSpec,
    thresholds: Thresholds,
) -> Result<Comparison> {
    if test_set.is_empty() {
        return Err(Error::Argument("comparison needs a non-empty test set".into()));
    }
    let mut gts = Vec::new();
    let mut base = Vec::new();
    let mut casc = Vec::new();
    let mut per_image = Vec::new();
    for (index, (frame, ann)) in test_set.iter().enumerate() {
        let wrap = |e| Error::Frame { index, source: Box::new(e) };
        let (boxes, classes) = ground_truth(ann, &d.vocab).map_err(wrap)?;
        let image_gts: Vec<GroundTruth> = boxes
            .into_iter()
            .zip(classes)
            .map(|(bbox, class_id)| GroundTruth { image_id: ann.image_id.clone(), class_id, bbox })
            .collect();
        let b = tag(&ann.image_id, detect(d, frame, thresholds.conf).map_err(wrap)?);
        let c = tag(&ann.image_id, detect_cascade(g, d, frame, spec, thresholds.conf).map_err(wrap)?);
        per_image.push(ImageRecall {
            image_id: ann.image_id.clone(),
            ground_truths: image_gts.len(),
            baseline_hits: matched_count(&b, &image_gts, thresholds.iou),
            cascade_hits: matched_count(&c, &image_gts, thresholds.iou),
        });
        gts.extend(image_gts);
        base.extend(b);
        casc.extend(c);
    }
    let fingerprint = Fingerprint {
        seed: None,
        iou_threshold: thresholds.iou,
        conf_threshold: Some(thresholds.conf),
        nms_threshold: Some(NMS_IOU),
    };
    let mut baseline = mean_average_precision(&base, &gts, thresholds.iou, Some(&d.vocab))?;
    let mut cascade = mean_average_precision(&casc, &gts, thresholds.iou, Some(&d.vocab))?;
    baseline.fingerprint = fingerprint.clone();
    cascade.fingerprint = fingerprint;
    Ok(Comparison {
        delta_recall: cascade.recall_at_iou - baseline.recall_at_iou,
        delta_map: cascade.map_score - baseline.map_score,
        baseline,
        cascade,
        per_image,
    })
}
