use super::Detection;
use crate::eval::iou;

/// Greedy per-class suppression: walking detections by descending confidence (ties
/// by input index), a detection survives unless a kept detection of the same class
/// overlaps it with IoU above `iou_threshold`. At most `top_k` survivors are returned.
pub fn nms(dets: &[Detection], iou_threshold: f64, top_k: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.len() == top_k {
            break;
        }
        let d = dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}
