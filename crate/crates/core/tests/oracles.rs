//! Box utilities and metrics checked against brute-force re-derivations.

mod common;

use common::oracles::{ap_by_curve, match_by_table, nms_by_enumeration};
use proptest::prelude::*;
use wildcascade::detect::{build_default_boxes, match_anchors, nms, BoundingBox, Detection, MapSpec};
use wildcascade::eval::{average_precision, GroundTruth, ImageDetection};

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.0..0.8f64, 0.0..0.8f64, 0.05..0.5f64, 0.05..0.5f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)).unwrap())
}

fn arb_dets(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((arb_box(), 1..3usize, 0.0..1.0f64), 0..max).prop_map(|v| {
        v.into_iter().map(|(bbox, class_id, confidence)| Detection { bbox, class_id, confidence }).collect()
    })
}

fn small_anchor_set() -> Vec<BoundingBox> {
    let specs = [MapSpec::with_aspect_count(3, 3, 3).unwrap(), MapSpec::with_aspect_count(2, 2, 3).unwrap(), MapSpec::with_aspect_count(1, 1, 3).unwrap()];
    build_default_boxes(&specs, 0.2, 0.8).unwrap().boxes
}

fn tagged(dets: &[Detection], images: &[usize]) -> Vec<ImageDetection> {
    dets.iter()
        .zip(images.iter().cycle())
        .map(|(d, i)| ImageDetection { image_id: format!("img{i}"), detection: *d })
        .collect()
}

proptest! {
    #[test]
    fn nms_equals_enumeration(dets in arb_dets(9), thr in 0.1..0.9f64) {
        prop_assert_eq!(nms(&dets, thr, usize::MAX), nms_by_enumeration(&dets, thr));
    }

    #[test]
    fn nms_top_k_truncates(dets in arb_dets(12), k in 0..6usize) {
        let all = nms(&dets, 0.45, usize::MAX);
        let cut = nms(&dets, 0.45, k);
        prop_assert_eq!(&all[..k.min(all.len())], &cut[..]);
    }

    #[test]
    fn ap_equals_curve_area(
        dets in arb_dets(14),
        gts in prop::collection::vec((arb_box(), 1..3usize, 0..2usize), 1..8),
        thr in 0.3..0.7f64,
    ) {
        let gts: Vec<GroundTruth> = gts
            .into_iter()
            .map(|(bbox, class_id, img)| GroundTruth { image_id: format!("img{img}"), class_id, bbox })
            .collect();
        let dets = tagged(&dets, &[0, 1]);
        for class_id in 1..3 {
            if gts.iter().all(|g| g.class_id != class_id) {
                prop_assert!(average_precision(&dets, &gts, class_id, thr).is_err());
                continue;
            }
            let ap = average_precision(&dets, &gts, class_id, thr).unwrap();
            prop_assert!((ap - ap_by_curve(&dets, &gts, class_id, thr)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }

    #[test]
    fn ap_ignores_input_order(
        dets in arb_dets(12),
        gts in prop::collection::vec((arb_box(), 1..3usize), 1..6),
        seed in any::<u64>(),
    ) {
        // Distinct confidences so the ranking is fully determined.
        let dets: Vec<Detection> = dets
            .into_iter()
            .enumerate()
            .map(|(i, d)| Detection { confidence: (d.confidence + i as f64) / 100.0, ..d })
            .collect();
        let gts: Vec<GroundTruth> = gts.into_iter().map(|(bbox, class_id)| GroundTruth { image_id: "img0".into(), class_id, bbox }).collect();
        let mut shuffled = dets.clone();
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let (a, b) = (tagged(&dets, &[0]), tagged(&shuffled, &[0]));
        for class_id in 1..3 {
            if gts.iter().any(|g| g.class_id == class_id) {
                prop_assert_eq!(average_precision(&a, &gts, class_id, 0.5).unwrap(), average_precision(&b, &gts, class_id, 0.5).unwrap());
            }
        }
    }

    #[test]
    fn matcher_equals_table(gts in prop::collection::vec(arb_box(), 0..6), thr in 0.2..0.7f64) {
        let anchors = small_anchor_set();
        let m = match_anchors(&gts, &anchors, thr).unwrap();
        prop_assert_eq!(m.anchor_to_gt, match_by_table(&gts, &anchors, thr));
    }

    #[test]
    fn every_ground_truth_gets_an_anchor(gts in prop::collection::vec(arb_box(), 1..12), thr in 0.3..0.9f64) {
        let anchors = small_anchor_set();
        let m = match_anchors(&gts, &anchors, thr).unwrap();
        for g in 0..gts.len() {
            prop_assert!(m.anchor_to_gt.contains(&Some(g)), "gt {} unmatched", g);
        }
        for (a, owner) in m.anchor_to_gt.iter().enumerate() {
            prop_assert_eq!(owner.is_some(), m.anchor_offsets[a].is_some());
        }
    }

    #[test]
    fn anchor_count_is_cells_times_aspects(
        maps in prop::collection::vec((1..7usize, 1..7usize, 1..7usize), 1..5),
        s_min in 0.05..0.4f64,
        span in 0.05..0.5f64,
    ) {
        let specs: Vec<MapSpec> = maps.iter().map(|&(r, c, n)| MapSpec::with_aspect_count(r, c, n).unwrap()).collect();
        let set = build_default_boxes(&specs, s_min, s_min + span).unwrap();
        let expected: usize = maps.iter().map(|(r, c, n)| r * c * n).sum();
        prop_assert_eq!(set.len(), expected);
        prop_assert_eq!(set.origins.len(), expected);
        let first_map = maps[0].0 * maps[0].1 * maps[0].2;
        prop_assert!(set.origins[..first_map].iter().all(|o| o.map == 0));
    }
}

#[test]
fn enumeration_oracle_on_a_hand_case() {
    let b = |x: f64| BoundingBox::new(x, 0.0, x + 0.4, 0.4).unwrap();
    // A suppresses B, B would have suppressed C, but C survives because B is gone.
    let dets = [
        Detection { bbox: b(0.0), class_id: 1, confidence: 0.9 },
        Detection { bbox: b(0.1), class_id: 1, confidence: 0.8 },
        Detection { bbox: b(0.3), class_id: 1, confidence: 0.7 },
    ];
    let kept = nms(&dets, 0.3, 10);
    assert_eq!(kept, vec![dets[0], dets[2]]);
    assert_eq!(kept, nms_by_enumeration(&dets, 0.3));
}
