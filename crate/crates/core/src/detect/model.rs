use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::log_softmax;
use super::{build_default_boxes, decode_box, nms, AnchorSet, Detection, MapSpec, Predictions};
use crate::data::ClassVocab;
use crate::enhance::{enhance_frame, EnhanceSpec};
use crate::error::{Error, Result};
use crate::gan::{Discriminator, DiscriminatorArch, Generator};
use crate::image::{to_batch, ImageTensor};
use crate::nn::{Grads, Init, LayerSpec, Mode, Sequential, Tape, Tensor};

pub const NMS_IOU: f64 = 0.45;
pub const TOP_K: usize = 200;
/// Prediction heads sit on this many of the smallest feature maps.
const HEAD_MAPS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorArch {
    pub input_size: usize,
    /// Widths of the discriminator-style `k4 s2` backbone ladder.
    pub backbone_widths: Vec<usize>,
    /// Widths of the appended `k3 s2` feature layers.
    pub extra_widths: Vec<usize>,
    pub aspects_per_map: usize,
    pub s_min: f64,
    pub s_max: f64,
    pub slope: f64,
}

impl Default for DetectorArch {
    fn default() -> Self {
        Self {
            input_size: 128,
            backbone_widths: vec![32, 64, 128],
            extra_widths: vec![128, 128],
            aspects_per_map: 4,
            s_min: 0.15,
            s_max: 0.6,
            slope: 0.2,
        }
    }
}

impl DetectorArch {
    /// The discriminator whose conv ladder this backbone shares.
    pub fn backbone_discriminator(&self) -> DiscriminatorArch {
        DiscriminatorArch {
            input_width: self.input_size,
            input_height: self.input_size,
            channels: 3,
            widths: self.backbone_widths.clone(),
            slope: self.slope,
        }
    }

    /// Layer lists of the backbone stage and each extra stage.
    pub fn stage_specs(&self) -> Result<Vec<Vec<LayerSpec>>> {
        let mut stages = vec![self.backbone_discriminator().ladder_specs()?];
        let mut prev = *self.backbone_widths.last().unwrap();
        for &w in &self.extra_widths {
            stages.push(vec![
                LayerSpec::Conv2d { in_channels: prev, out_channels: w, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::LeakyRelu { slope: self.slope },
            ]);
            prev = w;
        }
        Ok(stages)
    }
}

pub struct Detector {
    pub arch: DetectorArch,
    pub vocab: ClassVocab,
    pub stages: Vec<Sequential<f32>>,
    pub heads: Vec<Sequential<f32>>,
    pub anchors: AnchorSet,
    map_shapes: Vec<[usize; 3]>,
}

/// Recorded training pass over a batch.
pub struct DetectorTape {
    stage_tapes: Vec<Tape<f32>>,
    head_tapes: Vec<Tape<f32>>,
    head_out_shapes: Vec<[usize; 4]>,
    stage_out_shapes: Vec<[usize; 4]>,
}

impl Detector {
    pub fn new(arch: DetectorArch, vocab: ClassVocab, rng: &mut impl Rng) -> Result<Self> {
        let specs = arch.stage_specs()?;
        let mut shape = [3, arch.input_size, arch.input_size];
        let mut stages = Vec::new();
        let mut shapes = Vec::new();
        for s in &specs {
            let net = Sequential::new(shape, s, Init::He, rng)?;
            let out = net.output_shape();
            if let Some(prev) = shapes.last() {
                let [_, ph, pw]: [usize; 3] = *prev;
                if out[1] >= ph || out[2] >= pw {
                    return Err(Error::Shape(format!(
                        "extra feature layer does not shrink the {ph}x{pw} map"
                    )));
                }
            }
            shapes.push(out);
            stages.push(net);
            shape = out;
        }
        let classes = vocab.len() + 1;
        let a = arch.aspects_per_map;
        let first = shapes.len().saturating_sub(HEAD_MAPS);
        let map_shapes: Vec<[usize; 3]> = shapes[first..].to_vec();
        let heads = map_shapes
            .iter()
            .map(|&[c, h, w]| {
                let spec = LayerSpec::Conv2d { in_channels: c, out_channels: a * (4 + classes), kernel: 3, stride: 1, padding: 1 };
                Sequential::new([c, h, w], &[spec], Init::He, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let map_specs = map_shapes
            .iter()
            .map(|&[_, h, w]| MapSpec::with_aspect_count(h, w, a))
            .collect::<Result<Vec<_>>>()?;
        let anchors = build_default_boxes(&map_specs, arch.s_min, arch.s_max)?;
        Ok(Self { arch, vocab, stages, heads, anchors, map_shapes })
    }

    /// Rebuilds a detector around stored weights, checking them against the architecture.
    pub fn from_parts(
        arch: DetectorArch,
        vocab: ClassVocab,
        stages: Vec<Sequential<f32>>,
        heads: Vec<Sequential<f32>>,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Self::new(arch, vocab, &mut rng)?;
        let same = |a: &[Sequential<f32>], b: &[Sequential<f32>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.specs() == y.specs() && x.input_shape == y.input_shape)
        };
        if !same(&d.stages, &stages) || !same(&d.heads, &heads) {
            return Err(Error::Shape("detector weights do not match the architecture".into()));
        }
        d.stages = stages;
        d.heads = heads;
        Ok(d)
    }

    pub fn num_classes(&self) -> usize {
        self.vocab.len() + 1
    }

    /// Copies the conv ladder of a trained discriminator into the backbone.
    pub fn init_backbone(&mut self, d: &Discriminator<f32>) -> Result<()> {
        let n = d.ladder_len();
        let backbone = &mut self.stages[0];
        if n != backbone.layers.len() || d.net.specs()[..n] != backbone.specs()[..] {
            return Err(Error::Shape("discriminator ladder does not match the detector backbone".into()));
        }
        for (dst, src) in backbone.layers.iter_mut().zip(&d.net.layers[..n]) {
            dst.params = src.params.clone();
        }
        Ok(())
    }

    fn check(&self, x: &Tensor<f32>) -> Result<()> {
        let s = self.arch.input_size;
        if x.shape[1..] != [3, s, s] {
            return Err(Error::Shape(format!("detector expects 3x{s}x{s} inputs, got {:?}", &x.shape[1..])));
        }
        Ok(())
    }

    fn head_offset(&self) -> usize {
        self.stages.len() - self.heads.len()
    }

    /// Per-image predictions from head outputs, anchors ordered map, row, col, aspect.
    fn unpack(&self, outs: &[Tensor<f32>]) -> Vec<Predictions> {
        let (a, k) = (self.arch.aspects_per_map, self.num_classes());
        let n = outs[0].batch();
        (0..n)
            .map(|i| {
                let mut p = Predictions { loc: Vec::with_capacity(self.anchors.len()), logits: Vec::with_capacity(self.anchors.len()) };
                for out in outs {
                    let [_, _, h, w] = out.shape;
                    let item = out.item(i);
                    let at = |ch: usize, y: usize, x: usize| item[(ch * h + y) * w + x] as f64;
                    for y in 0..h {
                        for x in 0..w {
                            for asp in 0..a {
                                let base = asp * (4 + k);
                                p.loc.push(std::array::from_fn(|j| at(base + j, y, x)));
                                p.logits.push((0..k).map(|j| at(base + 4 + j, y, x)).collect());
                            }
                        }
                    }
                }
                p
            })
            .collect()
    }

    pub fn forward_train(&self, x: &Tensor<f32>) -> Result<(Vec<Predictions>, DetectorTape)> {
        self.check(x)?;
        let mut cur = x.clone();
        let mut feats = Vec::new();
        let mut stage_tapes = Vec::new();
        for s in &self.stages {
            let (y, t) = s.forward(&cur, Mode::Train)?;
            stage_tapes.push(t);
            feats.push(y.clone());
            cur = y;
        }
        let off = self.head_offset();
        let mut outs = Vec::new();
        let mut head_tapes = Vec::new();
        for (j, h) in self.heads.iter().enumerate() {
            let (o, t) = h.forward(&feats[off + j], Mode::Train)?;
            outs.push(o);
            head_tapes.push(t);
        }
        let tape = DetectorTape {
            stage_tapes,
            head_tapes,
            head_out_shapes: outs.iter().map(|o| o.shape).collect(),
            stage_out_shapes: feats.iter().map(|f| f.shape).collect(),
        };
        Ok((self.unpack(&outs), tape))
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<Predictions>> {
        self.check(x)?;
        let mut cur = x.clone();
        let off = self.head_offset();
        let mut outs = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            cur = s.infer(&cur)?;
            if i >= off {
                outs.push(self.heads[i - off].infer(&cur)?);
            }
        }
        Ok(self.unpack(&outs))
    }

    pub fn zero_grads(&self) -> DetectorGrads {
        DetectorGrads {
            stages: self.stages.iter().map(Sequential::zero_grads).collect(),
            heads: self.heads.iter().map(Sequential::zero_grads).collect(),
        }
    }

    /// Back-propagates per-image prediction gradients.
    pub fn backward(&self, tape: &DetectorTape, grad_loc: &[Vec<[f64; 4]>], grad_logits: &[Vec<Vec<f64>>], grads: &mut DetectorGrads) {
        let (a, k) = (self.arch.aspects_per_map, self.num_classes());
        let off = self.head_offset();
        let mut dfeat: Vec<Option<Tensor<f32>>> = vec![None; self.stages.len()];
        let mut anchor0 = 0;
        for (j, head) in self.heads.iter().enumerate() {
            let shape = tape.head_out_shapes[j];
            let [n, c, h, w] = shape;
            let mut dy = Tensor::<f32>::zeros(shape);
            for i in 0..n {
                let item = &mut dy.data[i * c * h * w..(i + 1) * c * h * w];
                let mut idx = anchor0;
                for y in 0..h {
                    for x in 0..w {
                        for asp in 0..a {
                            let base = asp * (4 + k);
                            for q in 0..4 {
                                item[((base + q) * h + y) * w + x] = grad_loc[i][idx][q] as f32;
                            }
                            for q in 0..k {
                                item[((base + 4 + q) * h + y) * w + x] = grad_logits[i][idx][q] as f32;
                            }
                            idx += 1;
                        }
                    }
                }
            }
            anchor0 += h * w * a;
            dfeat[off + j] = Some(head.backward(&tape.head_tapes[j], dy, Some(&mut grads.heads[j])));
        }
        let mut carry: Option<Tensor<f32>> = None;
        for s in (0..self.stages.len()).rev() {
            let mut d = match (dfeat[s].take(), carry.take()) {
                (Some(a), Some(b)) => add(a, &b),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => Tensor::zeros(tape.stage_out_shapes[s]),
            };
            d = self.stages[s].backward(&tape.stage_tapes[s], d, Some(&mut grads.stages[s]));
            carry = Some(d);
        }
    }

    pub fn update_running_stats(&mut self, tape: &DetectorTape, momentum: f64) {
        for (s, t) in self.stages.iter_mut().zip(&tape.stage_tapes) {
            s.update_running_stats(t, momentum);
        }
    }

    pub fn map_shapes(&self) -> &[[usize; 3]] {
        &self.map_shapes
    }

    /// Resizes to the detector input when needed and packs a single-image batch.
    pub fn prepare(&self, image: &ImageTensor) -> Result<Tensor<f32>> {
        let s = self.arch.input_size;
        let img = image.to_rgb().resize_bilinear(s, s)?;
        to_batch(std::slice::from_ref(&img))
    }
}

fn add(mut a: Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += *y);
    a
}

#[derive(Clone, Debug)]
pub struct DetectorGrads {
    pub stages: Vec<Grads<f32>>,
    pub heads: Vec<Grads<f32>>,
}

/// Decodes raw predictions: per anchor and non-background class, keep confidences
/// strictly above `conf_threshold`, then class-wise NMS.
pub fn decode_predictions(d: &Detector, pred: &Predictions, conf_threshold: f64) -> Vec<Detection> {
    let mut dets = Vec::new();
    for (i, (loc, logits)) in pred.loc.iter().zip(&pred.logits).enumerate() {
        let (_, probs) = log_softmax(logits);
        let mut decoded = None;
        for (cls, &p) in probs.iter().enumerate().skip(1) {
            if p > conf_threshold && p.is_finite() {
                let bbox = match decoded {
                    Some(b) => b,
                    None => match decode_box(loc, &d.anchors.boxes[i]) {
                        Ok(b) => {
                            decoded = Some(b);
                            b
                        }
                        Err(_) => break,
                    },
                };
                dets.push(Detection { bbox, class_id: cls, confidence: p });
            }
        }
    }
    nms(&dets, NMS_IOU, TOP_K)
}

pub fn detect(d: &Detector, image: &ImageTensor, conf_threshold: f64) -> Result<Vec<Detection>> {
    let pred = d.predict(&d.prepare(image)?)?;
    Ok(decode_predictions(d, &pred[0], conf_threshold))
}

/// Enhances the frame, then detects on the enhanced image. Boxes are normalized, so
/// they apply to the original frame unchanged.
pub fn detect_cascade(
    g: &Generator<f32>,
    d: &Detector,
    frame: &ImageTensor,
    spec: &EnhanceSpec,
    conf_threshold: f64,
) -> Result<Vec<Detection>> {
    detect(d, &enhance_frame(g, frame, spec)?, conf_threshold)
}
