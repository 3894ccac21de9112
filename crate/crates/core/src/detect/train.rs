use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Detector, DetectorArch};
use super::{detection_loss, match_anchors, BoundingBox, DetectionTargets};
use crate::data::{epoch_batches, Annotation, ClassVocab};
use crate::enhance::{enhance_frame, EnhanceSpec};
use crate::error::{Error, Result};
use crate::gan::{Discriminator, Generator};
use crate::image::ImageTensor;
use crate::nn::{Adam, AdamConfig, Tensor};

const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub arch: DetectorArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub match_threshold: f64,
    pub neg_pos_ratio: usize,
    /// Random horizontal flips, drawn from the seed.
    pub flip: bool,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            arch: DetectorArch::default(),
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            match_threshold: 0.5,
            neg_pos_ratio: 3,
            flip: true,
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Argument("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Argument("learning_rate must be > 0".into()));
        }
        if !(self.match_threshold > 0.0 && self.match_threshold <= 1.0) {
            return Err(Error::Argument("match_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Where the detector weights start.
pub enum DetectorInit<'a> {
    Scratch,
    /// Backbone copied from a discriminator's conv ladder.
    Backbone(&'a Discriminator<f32>),
    /// Continue from an existing detector.
    Detector(&'a Detector),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorLossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub positives: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorEpoch {
    pub epoch: usize,
    pub batches: usize,
    pub loss: f64,
}

pub struct DetectorRun {
    pub detector: Detector,
    pub log: Vec<DetectorLossRecord>,
    pub epochs: Vec<DetectorEpoch>,
}

/// A detector-ready example: the input tensor item and matching targets, plain and
/// mirrored.
pub struct PreparedExample {
    input: Tensor<f32>,
    mirrored: Tensor<f32>,
    targets: DetectionTargets,
    mirrored_targets: DetectionTargets,
}

fn mirror(t: &Tensor<f32>) -> Tensor<f32> {
    let [n, c, h, w] = t.shape;
    let mut out = t.clone();
    for p in 0..n * c * h {
        let row = &t.data[p * w..(p + 1) * w];
        out.data[p * w..(p + 1) * w].iter_mut().zip(row.iter().rev()).for_each(|(o, v)| *o = *v);
    }
    out
}

/// Normalized boxes and 1-based class ids of an annotation.
pub fn ground_truth(ann: &Annotation, vocab: &ClassVocab) -> Result<(Vec<BoundingBox>, Vec<usize>)> {
    let mut boxes = Vec::new();
    let mut classes = Vec::new();
    for (label, b) in ann.normalized() {
        classes.push(
            vocab
                .class_id(label)
                .ok_or_else(|| Error::Validation(format!("{}: unknown class '{label}'", ann.image_id)))?,
        );
        boxes.push(b);
    }
    Ok((boxes, classes))
}

/// Resizes (optionally after enhancement) and matches every example once.
pub fn prepare_examples(
    d: &Detector,
    data: &[(ImageTensor, Annotation)],
    match_threshold: f64,
    enhancer: Option<(&Generator<f32>, &EnhanceSpec)>,
) -> Result<Vec<PreparedExample>> {
    data.iter()
        .map(|(img, ann)| {
            ann.validate()?;
            let img = match enhancer {
                Some((g, spec)) => enhance_frame(g, img, spec)?,
                None => img.clone(),
            };
            let input = d.prepare(&img)?;
            let (boxes, classes) = ground_truth(ann, &d.vocab)?;
            let flipped: Vec<BoundingBox> = boxes
                .iter()
                .map(|b| BoundingBox::new(1.0 - b.xmax, b.ymin, 1.0 - b.xmin, b.ymax))
                .collect::<Result<_>>()?;
            let targets = match_anchors(&boxes, &d.anchors.boxes, match_threshold)?.targets(&classes);
            let mirrored_targets = match_anchors(&flipped, &d.anchors.boxes, match_threshold)?.targets(&classes);
            Ok(PreparedExample { mirrored: mirror(&input), input, targets, mirrored_targets })
        })
        .collect()
}

/// Mean per-image detection loss in evaluation mode.
pub fn dataset_loss(d: &Detector, examples: &[PreparedExample], neg_pos_ratio: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Argument("no examples".into()));
    }
    let mut total = 0.0;
    for chunk in examples.chunks(32) {
        let x = Tensor::stack(&chunk.iter().map(|e| e.input.clone()).collect::<Vec<_>>());
        for (p, e) in d.predict(&x)?.iter().zip(chunk) {
            total += detection_loss(p, &e.targets, neg_pos_ratio)?.loss;
        }
    }
    Ok(total / examples.len() as f64)
}

struct Optimizers {
    stages: Vec<Adam<f32>>,
    heads: Vec<Adam<f32>>,
}

pub fn train_detector(
    config: &DetectorTrainConfig,
    data: &[(ImageTensor, Annotation)],
    enhancer: Option<(&Generator<f32>, &EnhanceSpec)>,
    init: DetectorInit<'_>,
    mut observer: impl FnMut(&DetectorEpoch, &Detector) -> Result<()>,
) -> Result<DetectorRun> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let anns: Vec<Annotation> = data.iter().map(|(_, a)| a.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut detector = match init {
        DetectorInit::Detector(src) => {
            src.vocab.check(&anns)?;
            Detector::from_parts(src.arch.clone(), src.vocab.clone(), src.stages.clone(), src.heads.clone())?
        }
        other => {
            let mut d = Detector::new(config.arch.clone(), ClassVocab::from_annotations(&anns)?, &mut rng)?;
            if let DetectorInit::Backbone(disc) = other {
                d.init_backbone(disc)?;
            }
            d
        }
    };
    let examples = prepare_examples(&detector, data, config.match_threshold, enhancer)?;
    let adam = AdamConfig { learning_rate: config.learning_rate, beta1: 0.9, ..AdamConfig::default() };
    let mut opt = Optimizers {
        stages: detector.stages.iter().map(|s| Adam::new(s, adam)).collect(),
        heads: detector.heads.iter().map(|h| Adam::new(h, adam)).collect(),
    };
    let mut flip_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x666c_6970);
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    for epoch in 0..config.epochs {
        let start = log.len();
        for (bi, idx) in epoch_batches(examples.len(), config.batch_size, config.seed, true, epoch as u64)?
            .iter()
            .enumerate()
        {
            let flips: Vec<bool> = idx.iter().map(|_| config.flip && flip_rng.random::<bool>()).collect();
            let inputs: Vec<Tensor<f32>> = idx
                .iter()
                .zip(&flips)
                .map(|(&i, &f)| if f { examples[i].mirrored.clone() } else { examples[i].input.clone() })
                .collect();
            let (preds, tape) = detector.forward_train(&Tensor::stack(&inputs))?;
            let scale = 1.0 / idx.len() as f64;
            let (mut loss, mut positives) = (0.0, 0);
            let mut grad_loc = Vec::with_capacity(idx.len());
            let mut grad_logits = Vec::with_capacity(idx.len());
            for ((p, &i), &f) in preds.iter().zip(idx).zip(&flips) {
                let t = if f { &examples[i].mirrored_targets } else { &examples[i].targets };
                let out = detection_loss(p, t, config.neg_pos_ratio)?;
                loss += out.loss * scale;
                positives += out.positives;
                grad_loc.push(out.grad_loc.iter().map(|g| g.map(|v| v * scale)).collect());
                grad_logits.push(out.grad_logits.iter().map(|g| g.iter().map(|v| v * scale).collect()).collect());
            }
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite detection loss at epoch {epoch}, batch {bi}")));
            }
            let mut grads = detector.zero_grads();
            detector.backward(&tape, &grad_loc, &grad_logits, &mut grads);
            for ((s, o), g) in detector.stages.iter_mut().zip(&mut opt.stages).zip(&grads.stages) {
                o.step(s, g);
            }
            for ((h, o), g) in detector.heads.iter_mut().zip(&mut opt.heads).zip(&grads.heads) {
                o.step(h, g);
            }
            detector.update_running_stats(&tape, BN_MOMENTUM);
            log.push(DetectorLossRecord { epoch, batch: bi, loss, positives });
        }
        let rows = &log[start..];
        let summary = DetectorEpoch {
            epoch,
            batches: rows.len(),
            loss: rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64,
        };
        observer(&summary, &detector)?;
        epochs.push(summary);
    }
    Ok(DetectorRun { detector, log, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::detection_corpus;
    use crate::image::{from_batch, to_batch};

    fn config() -> DetectorTrainConfig {
        DetectorTrainConfig {
            arch: DetectorArch { input_size: 32, backbone_widths: vec![4, 8], extra_widths: vec![8, 8], ..DetectorArch::default() },
            epochs: 2,
            batch_size: 4,
            seed: 5,
            ..DetectorTrainConfig::default()
        }
    }

    #[test]
    fn mirror_flips_columns() {
        let img = ImageTensor::from_fn(2, 3, 3, |_, x, _| x as f32 * 0.5 - 0.5);
        let t: Tensor<f32> = to_batch(std::slice::from_ref(&img)).unwrap();
        let back = from_batch(&mirror(&t)).unwrap().remove(0);
        assert_eq!(back.get(1, 0, 2), img.get(1, 2, 2));
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let data = detection_corpus(10, 32, 1, &["square", "disc"], 2).unwrap();
        let mut calls = 0;
        let a = train_detector(&config(), &data, None, DetectorInit::Scratch, |_, _| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 2);
        assert_eq!(a.log.len(), 2 * 3);
        let b = train_detector(&config(), &data, None, DetectorInit::Scratch, |_, _| Ok(())).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.detector.heads[0].layers[0].params, b.detector.heads[0].layers[0].params);
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = detection_corpus(2, 32, 1, &["square"], 1).unwrap();
        let cfg = DetectorTrainConfig { epochs: 0, ..config() };
        assert!(matches!(train_detector(&cfg, &data, None, DetectorInit::Scratch, |_, _| Ok(())), Err(Error::Argument(_))));
        assert!(train_detector(&config(), &[], None, DetectorInit::Scratch, |_, _| Ok(())).is_err());
    }
}
