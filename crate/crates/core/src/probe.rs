//! Linear probing of discriminator features: every conv stage's activation is
//! max-pooled to a 4x4 grid, the grids are concatenated, and a softmax classifier
//! with an L2 penalty is fit on top.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::Discriminator;
use crate::image::{to_batch, ImageTensor};
use crate::nn::Tensor;

pub const PROBE_GRID: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeBlock {
    pub layer: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeVector {
    pub values: Vec<f32>,
    pub layout: Vec<ProbeBlock>,
}

/// Window `[start, end)` of output cell `i` when pooling `len` inputs into `out` cells:
/// `floor(i*len/out) .. ceil((i+1)*len/out)`.
fn window(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

/// Adaptive max-pool of a `c x h x w` map to `c x grid x grid`, channel-major.
pub fn adaptive_max_pool(map: &[f32], c: usize, h: usize, w: usize, grid: usize) -> Result<Vec<f32>> {
    if h < grid || w < grid {
        return Err(Error::Config(format!("{h}x{w} activation is smaller than the {grid}x{grid} probe grid")));
    }
    let mut out = Vec::with_capacity(c * grid * grid);
    for ch in 0..c {
        let plane = &map[ch * h * w..(ch + 1) * h * w];
        for gy in 0..grid {
            let (y0, y1) = window(gy, h, grid);
            for gx in 0..grid {
                let (x0, x1) = window(gx, w, grid);
                let mut m = f32::NEG_INFINITY;
                for y in y0..y1 {
                    for &v in &plane[y * w + x0..y * w + x1] {
                        m = m.max(v);
                    }
                }
                out.push(m);
            }
        }
    }
    Ok(out)
}

/// Probe vectors for a batch of images, taken after every conv stage's activation in
/// evaluation mode.
pub fn extract_features_batch(d: &Discriminator<f32>, images: &[ImageTensor]) -> Result<Vec<ProbeVector>> {
    let taps = d.conv_taps();
    if taps.is_empty() {
        return Err(Error::Config("discriminator has no conv stages".into()));
    }
    let shapes = d.net.shapes_for(d.arch.input_shape())?;
    let layout: Vec<ProbeBlock> = taps.iter().map(|&t| ProbeBlock { layer: t, channels: shapes[t][0] }).collect();
    for &t in &taps {
        let [_, h, w] = shapes[t];
        if h < PROBE_GRID || w < PROBE_GRID {
            return Err(Error::Config(format!("layer {t} map {h}x{w} is smaller than the probe grid")));
        }
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let x: Tensor<f32> = to_batch(chunk)?;
        let mut vecs: Vec<Vec<f32>> = vec![Vec::new(); chunk.len()];
        let mut err = None;
        d.net.infer_with(&x, |i, t| {
            if taps.contains(&i) {
                let [_, c, h, w] = t.shape;
                for (n, v) in vecs.iter_mut().enumerate() {
                    match adaptive_max_pool(t.item(n), c, h, w, PROBE_GRID) {
                        Ok(p) => v.extend(p),
                        Err(e) => err = Some(e),
                    }
                }
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        out.extend(vecs.into_iter().map(|values| ProbeVector { values, layout: layout.clone() }));
    }
    Ok(out)
}

pub fn extract_features(d: &Discriminator<f32>, image: &ImageTensor) -> Result<ProbeVector> {
    Ok(extract_features_batch(d, std::slice::from_ref(image))?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub l2_strength: f64,
    /// Per-dimension standardization fitted on the training features.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTrainOptions {
    pub max_iterations: usize,
    pub grad_tolerance: f64,
    pub standardize: bool,
}

impl Default for ProbeTrainOptions {
    fn default() -> Self {
        Self { max_iterations: 500, grad_tolerance: 1e-5, standardize: true }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    z.iter_mut().for_each(|v| *v /= s);
}

struct Objective<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    k: usize,
    dim: usize,
    l2: f64,
}

impl Objective<'_> {
    /// Parameters are `[weights (k*dim), bias (k)]`.
    fn eval(&self, theta: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (k, dim) = (self.k, self.dim);
        let (w, b) = theta.split_at(k * dim);
        let n = self.x.len() as f64;
        let mut loss = 0.0;
        let mut g = grad;
        if let Some(g) = g.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut z = vec![0.0; k];
        for (xi, &yi) in self.x.iter().zip(self.y) {
            for c in 0..k {
                z[c] = b[c] + w[c * dim..(c + 1) * dim].iter().zip(xi).map(|(a, v)| a * v).sum::<f64>();
            }
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += (lse - z[yi]) / n;
            if let Some(g) = g.as_deref_mut() {
                for c in 0..k {
                    let coef = ((z[c] - lse).exp() - if c == yi { 1.0 } else { 0.0 }) / n;
                    let (gw, gb) = g.split_at_mut(k * dim);
                    gb[c] += coef;
                    for (gv, v) in gw[c * dim..(c + 1) * dim].iter_mut().zip(xi) {
                        *gv += coef * v;
                    }
                }
            }
        }
        loss += self.l2 * w.iter().map(|v| v * v).sum::<f64>();
        if let Some(g) = g {
            for (gv, v) in g[..k * dim].iter_mut().zip(w) {
                *gv += 2.0 * self.l2 * v;
            }
        }
        loss
    }
}

/// Probe plus the objective value after every accepted iteration.
pub struct ProbeFit {
    pub probe: LinearProbe,
    pub losses: Vec<f64>,
}

pub fn train_linear_probe(features: &[ProbeVector], labels: &[usize], l2_strength: f64, seed: u64) -> Result<LinearProbe> {
    Ok(train_linear_probe_with(features, labels, l2_strength, seed, ProbeTrainOptions::default())?.probe)
}

/// Full-batch gradient descent with Armijo backtracking, stopping when the gradient
/// norm drops below the tolerance or at the iteration cap.
pub fn train_linear_probe_with(
    features: &[ProbeVector],
    labels: &[usize],
    l2_strength: f64,
    seed: u64,
    opts: ProbeTrainOptions,
) -> Result<ProbeFit> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Shape(format!("{} feature vectors for {} labels", features.len(), labels.len())));
    }
    if !(l2_strength >= 0.0) || !l2_strength.is_finite() {
        return Err(Error::Argument(format!("l2 strength {l2_strength} must be finite and >= 0")));
    }
    let dim = features[0].values.len();
    if dim == 0 || features.iter().any(|f| f.values.len() != dim) {
        return Err(Error::Shape("probe vectors differ in length".into()));
    }
    let k = labels.iter().max().unwrap() + 1;
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Validation("probe training needs at least two classes".into()));
    }
    let n = features.len() as f64;
    let (mut mean, mut scale) = (vec![0.0; dim], vec![1.0; dim]);
    if opts.standardize {
        for f in features {
            for (m, &v) in mean.iter_mut().zip(&f.values) {
                *m += v as f64 / n;
            }
        }
        let mut var = vec![0.0; dim];
        for f in features {
            for ((s, &v), m) in var.iter_mut().zip(&f.values).zip(&mean) {
                *s += (v as f64 - m).powi(2) / n;
            }
        }
        for (s, v) in scale.iter_mut().zip(var) {
            *s = if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 };
        }
    }
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.values.iter().zip(&mean).zip(&scale).map(|((&v, m), s)| (v as f64 - m) * s).collect())
        .collect();
    let obj = Objective { x: &x, y: labels, k, dim, l2: l2_strength };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 1e-3).expect("valid normal");
    let mut theta: Vec<f64> = (0..k * dim).map(|_| init.sample(&mut rng)).chain(std::iter::repeat_n(0.0, k)).collect();
    let mut grad = vec![0.0; theta.len()];
    let mut loss = obj.eval(&theta, Some(&mut grad));
    let mut losses = vec![loss];
    // Diagonal preconditioner: the penalty's curvature on the weights would otherwise
    // force tiny steps on the bias as well.
    let precond: Vec<f64> = (0..theta.len()).map(|i| if i < k * dim { 1.0 / (1.0 + 2.0 * l2_strength) } else { 1.0 }).collect();
    let mut step: f64 = 1.0;
    let mut trial = vec![0.0; theta.len()];
    for _ in 0..opts.max_iterations {
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        if gnorm2.sqrt() < opts.grad_tolerance {
            break;
        }
        let decrease: f64 = grad.iter().zip(&precond).map(|(g, p)| g * g * p).sum();
        step = (step * 2.0).min(1e3);
        let mut accepted = false;
        for _ in 0..60 {
            for (((t, th), g), p) in trial.iter_mut().zip(&theta).zip(&grad).zip(&precond) {
                *t = th - step * p * g;
            }
            let l = obj.eval(&trial, None);
            if l <= loss - 0.5 * step * decrease {
                std::mem::swap(&mut theta, &mut trial);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        loss = obj.eval(&theta, Some(&mut grad));
        if !loss.is_finite() {
            return Err(Error::Numeric("probe objective became non-finite".into()));
        }
        losses.push(loss);
    }
    let mut bias = theta.split_off(k * dim);
    // Checkpoints store f32, so keep only f32-representable values and a loaded
    // probe predicts exactly as the trained one.
    for v in theta.iter_mut().chain(&mut bias).chain(&mut mean).chain(&mut scale) {
        *v = *v as f32 as f64;
    }
    Ok(ProbeFit {
        probe: LinearProbe { classes: k, dim, weights: theta, bias, l2_strength, mean, scale },
        losses,
    })
}

/// Predicted class (lowest index on ties) and class probabilities.
pub fn probe_predict(p: &LinearProbe, v: &ProbeVector) -> Result<(usize, Vec<f64>)> {
    if v.values.len() != p.dim {
        return Err(Error::Shape(format!("probe expects {} features, got {}", p.dim, v.values.len())));
    }
    let x: Vec<f64> = v.values.iter().zip(&p.mean).zip(&p.scale).map(|((&a, m), s)| (a as f64 - m) * s).collect();
    let mut z: Vec<f64> = (0..p.classes)
        .map(|c| p.bias[c] + p.weights[c * p.dim..(c + 1) * p.dim].iter().zip(&x).map(|(w, v)| w * v).sum::<f64>())
        .collect();
    softmax_in_place(&mut z);
    let mut best = 0;
    for (c, &pr) in z.iter().enumerate() {
        if pr > z[best] {
            best = c;
        }
    }
    Ok((best, z))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub accuracy: f64,
    /// `(precision, recall)` per class; 0 when undefined.
    pub per_class: Vec<(f64, f64)>,
}

pub fn evaluate_probe(p: &LinearProbe, features: &[ProbeVector], labels: &[usize]) -> Result<ProbeMetrics> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Shape("features and labels differ in length".into()));
    }
    let mut confusion = vec![vec![0usize; p.classes]; p.classes];
    for (f, &y) in features.iter().zip(labels) {
        if y >= p.classes {
            return Err(Error::Validation(format!("label {y} outside {} classes", p.classes)));
        }
        confusion[y][probe_predict(p, f)?.0] += 1;
    }
    let correct: usize = (0..p.classes).map(|c| confusion[c][c]).sum();
    let per_class = (0..p.classes)
        .map(|c| {
            let predicted: usize = (0..p.classes).map(|r| confusion[r][c]).sum();
            let actual: usize = confusion[c].iter().sum();
            let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            (ratio(confusion[c][c], predicted), ratio(confusion[c][c], actual))
        })
        .collect();
    Ok(ProbeMetrics { accuracy: correct as f64 / features.len() as f64, per_class })
}

/// `split,accuracy,class,precision,recall`, one row per split and class.
pub fn probe_report_csv(rows: &[(&str, &ProbeMetrics)], class_names: &[String]) -> String {
    let mut out = String::from("split,accuracy,class,precision,recall\n");
    for (split, m) in rows {
        for (c, (pr, rc)) in m.per_class.iter().enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            let _ = writeln!(out, "{split},{},{name},{pr},{rc}", m.accuracy);
        }
    }
    out
}
