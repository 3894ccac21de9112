//! Brute-force re-derivations of the box utilities and metrics, plus random
//! instance generators for them.

use rand::Rng;
use wildcascade::detect::{BoundingBox, Detection};
use wildcascade::eval::{iou, GroundTruth, ImageDetection};

pub fn random_box(rng: &mut impl Rng) -> BoundingBox {
    let (x, y) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
    let (w, h): (f64, f64) = (rng.random_range(0.05..0.5), rng.random_range(0.05..0.5));
    BoundingBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)).unwrap()
}

pub fn random_detections(rng: &mut impl Rng, n: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection { bbox: random_box(rng), class_id: rng.random_range(1..=classes), confidence: rng.random_range(0.0..1.0) })
        .collect()
}

pub fn random_ground_truth(rng: &mut impl Rng, n: usize, classes: usize, images: usize) -> Vec<GroundTruth> {
    (0..n)
        .map(|_| GroundTruth {
            image_id: format!("img{}", rng.random_range(0..images)),
            class_id: rng.random_range(1..=classes),
            bbox: random_box(rng),
        })
        .collect()
}

/// Rank order: descending confidence, then input index.
pub fn rank(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap().then(a.cmp(&b)));
    idx
}

/// The unique subset in which no two same-class members overlap above `thr`
/// and every non-member is overlapped by a higher-ranked member, found by
/// enumerating all subsets.
pub fn nms_by_enumeration(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let order = rank(dets);
    let pos: Vec<usize> = {
        let mut p = vec![0; dets.len()];
        for (r, &i) in order.iter().enumerate() {
            p[i] = r;
        }
        p
    };
    let clash = |a: usize, b: usize| dets[a].class_id == dets[b].class_id && iou(&dets[a].bbox, &dets[b].bbox) > thr;
    let mut found = Vec::new();
    for mask in 0u32..(1 << dets.len()) {
        let member = |i: usize| mask & (1 << i) != 0;
        let disjoint = (0..dets.len()).all(|a| !member(a) || (0..a).all(|b| !member(b) || !clash(a, b)));
        let covered = (0..dets.len()).all(|a| member(a) || (0..dets.len()).any(|b| member(b) && pos[b] < pos[a] && clash(a, b)));
        if disjoint && covered {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "the greedy fixpoint is unique");
    order.into_iter().filter(|&i| found[0] & (1 << i) != 0).map(|i| dets[i]).collect()
}

/// Area under the precision envelope from one PR point per ranking cut.
pub fn ap_by_curve(dets: &[ImageDetection], gts: &[GroundTruth], class_id: usize, thr: f64) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].detection.class_id == class_id).collect();
    order.sort_by(|&a, &b| dets[b].detection.confidence.partial_cmp(&dets[a].detection.confidence).unwrap().then(a.cmp(&b)));
    let npos = gts.iter().filter(|g| g.class_id == class_id).count() as f64;
    let mut used = vec![false; gts.len()];
    let mut points = vec![(0.0, 1.0)];
    let mut tp = 0.0;
    for (k, &di) in order.iter().enumerate() {
        let d = &dets[di];
        let best = (0..gts.len())
            .filter(|&g| !used[g] && gts[g].class_id == class_id && gts[g].image_id == d.image_id)
            .map(|g| (g, iou(&gts[g].bbox, &d.detection.bbox)))
            .filter(|&(_, v)| v >= thr)
            .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        if let Some((g, _)) = best {
            used[g] = true;
            tp += 1.0;
        }
        points.push((tp / npos, tp / (k + 1) as f64));
    }
    let mut area = 0.0;
    for k in 1..points.len() {
        let envelope = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        area += (points[k].0 - points[k - 1].0) * envelope;
    }
    area
}

/// Direct transcription of the two-stage rule over a full IoU table.
pub fn match_by_table(gts: &[BoundingBox], anchors: &[BoundingBox], thr: f64) -> Vec<Option<usize>> {
    let table: Vec<Vec<f64>> = gts.iter().map(|g| anchors.iter().map(|a| iou(g, a)).collect()).collect();
    let mut owner = vec![None; anchors.len()];
    for (g, row) in table.iter().enumerate() {
        let free: Vec<usize> = (0..anchors.len()).filter(|&a| owner[a].is_none()).collect();
        let top = free.iter().map(|&a| row[a]).fold(f64::NEG_INFINITY, f64::max);
        if let Some(&a) = free.iter().find(|&&a| row[a] == top) {
            owner[a] = Some(g);
        }
    }
    for a in 0..anchors.len() {
        if owner[a].is_some() || gts.is_empty() {
            continue;
        }
        let top = (0..gts.len()).map(|g| table[g][a]).fold(f64::NEG_INFINITY, f64::max);
        if top >= thr {
            owner[a] = (0..gts.len()).find(|&g| table[g][a] == top);
        }
    }
    owner
}
