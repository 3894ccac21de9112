use super::DetectionTargets;
use crate::error::{Error, Result};

/// Raw head outputs for one image: `4` offsets and `num_classes` logits per anchor
/// (`num_classes` counts background).
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub loc: Vec<[f64; 4]>,
    pub logits: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_loc: Vec<[f64; 4]>,
    pub grad_logits: Vec<Vec<f64>>,
    pub positives: usize,
}

pub(crate) fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Log-softmax of `logits` and the softmax probabilities.
pub(crate) fn log_softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let logp: Vec<f64> = logits.iter().map(|v| v - lse).collect();
    let p = logp.iter().map(|v| v.exp()).collect();
    (logp, p)
}

/// Smooth-L1 localization over positives plus softmax cross-entropy over positives
/// and the `neg_pos_ratio * N_pos` hardest background anchors, all divided by
/// `N_pos`. Background anchors are ranked by their background cross-entropy, ties
/// to the lower index. Zero positives give a zero loss.
pub fn detection_loss(pred: &Predictions, targets: &DetectionTargets, neg_pos_ratio: usize) -> Result<LossOutput> {
    let n = pred.loc.len();
    if pred.logits.len() != n || targets.labels.len() != n || targets.offsets.len() != n {
        return Err(Error::Shape(format!(
            "{} offsets, {} score rows, {} targets",
            n,
            pred.logits.len(),
            targets.labels.len()
        )));
    }
    let k = pred.logits.first().map_or(0, Vec::len);
    if pred.logits.iter().any(|l| l.len() != k) || k < 2 {
        return Err(Error::Shape("score rows must share a class count >= 2".into()));
    }
    if let Some(&bad) = targets.labels.iter().find(|&&l| l >= k) {
        return Err(Error::Shape(format!("label {bad} outside {k} classes")));
    }
    let mut out = LossOutput {
        loss: 0.0,
        grad_loc: vec![[0.0; 4]; n],
        grad_logits: vec![vec![0.0; k]; n],
        positives: targets.labels.iter().filter(|&&l| l > 0).count(),
    };
    if out.positives == 0 {
        return Ok(out);
    }
    let scale = 1.0 / out.positives as f64;

    let mut negatives: Vec<(usize, f64)> = Vec::new();
    let mut selected = vec![false; n];
    for i in 0..n {
        if targets.labels[i] > 0 {
            selected[i] = true;
            for c in 0..4 {
                let (v, d) = smooth_l1(pred.loc[i][c] - targets.offsets[i][c]);
                out.loss += v * scale;
                out.grad_loc[i][c] = d * scale;
            }
        } else {
            let (logp, _) = log_softmax(&pred.logits[i]);
            negatives.push((i, -logp[0]));
        }
    }
    negatives.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for &(i, _) in negatives.iter().take(neg_pos_ratio * out.positives) {
        selected[i] = true;
    }
    for i in (0..n).filter(|&i| selected[i]) {
        let (logp, p) = log_softmax(&pred.logits[i]);
        let label = targets.labels[i];
        out.loss -= logp[label] * scale;
        for c in 0..k {
            out.grad_logits[i][c] = (p[c] - if c == label { 1.0 } else { 0.0 }) * scale;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_positives_no_loss() {
        let pred = Predictions { loc: vec![[0.3; 4]; 3], logits: vec![vec![0.0, 1.0, 2.0]; 3] };
        let t = DetectionTargets { labels: vec![0; 3], offsets: vec![[0.0; 4]; 3] };
        let out = detection_loss(&pred, &t, 3).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_logits.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn two_anchor_hand_computation() {
        // Anchor 0 positive (class 1), anchor 1 background and selected as a hard negative.
        let pred = Predictions {
            loc: vec![[0.5, -2.0, 0.0, 0.1], [9.0, 9.0, 9.0, 9.0]],
            logits: vec![vec![0.2, 1.0], vec![0.5, -0.5]],
        };
        let t = DetectionTargets { labels: vec![1, 0], offsets: vec![[0.0, 0.0, 0.0, 0.0], [0.0; 4]] };
        let out = detection_loss(&pred, &t, 3).unwrap();
        let loc = 0.5 * 0.25 + (2.0 - 0.5) + 0.0 + 0.5 * 0.01;
        let ce_pos = -(1.0f64 - (0.2f64.exp() + 1.0f64.exp()).ln());
        let ce_neg = -(0.5f64 - (0.5f64.exp() + (-0.5f64).exp()).ln());
        assert!((out.loss - (loc + ce_pos + ce_neg)).abs() < 1e-6);
    }

    #[test]
    fn confident_exact_predictions_approach_zero() {
        let t = DetectionTargets { labels: vec![2, 0], offsets: vec![[0.1, 0.2, -0.3, 0.0], [0.0; 4]] };
        let mut last = f64::INFINITY;
        for margin in [2.0, 5.0, 10.0, 20.0] {
            let pred = Predictions {
                loc: vec![t.offsets[0], [0.0; 4]],
                logits: vec![vec![0.0, 0.0, margin], vec![margin, 0.0, 0.0]],
            };
            let l = detection_loss(&pred, &t, 3).unwrap().loss;
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-8);
    }

    #[test]
    fn hard_negatives_are_capped() {
        let pred = Predictions {
            loc: vec![[0.0; 4]; 6],
            logits: vec![vec![0.0, 0.0], vec![-1.0, 0.0], vec![-3.0, 0.0], vec![-2.0, 0.0], vec![0.0, 0.0], vec![-4.0, 0.0]],
        };
        let t = DetectionTargets { labels: vec![1, 0, 0, 0, 0, 0], offsets: vec![[0.0; 4]; 6] };
        let out = detection_loss(&pred, &t, 2).unwrap();
        // Hardest two negatives: anchors 5 and 2.
        let touched: Vec<usize> = (1..6).filter(|&i| out.grad_logits[i][0] != 0.0).collect();
        assert_eq!(touched, [2, 5]);
    }

    #[test]
    fn mismatched_lengths_are_shape_errors() {
        let pred = Predictions { loc: vec![[0.0; 4]; 2], logits: vec![vec![0.0, 0.0]; 3] };
        let t = DetectionTargets { labels: vec![0; 2], offsets: vec![[0.0; 4]; 2] };
        assert!(matches!(detection_loss(&pred, &t, 3), Err(Error::Shape(_))));
    }
}
