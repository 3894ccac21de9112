use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::conv::{col2im, im2col, ConvGeom};
use super::scalar::{gemm, MatRef};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;

/// Above this many unfolded elements, inference convolutions are computed in row bands.
const IM2COL_BUDGET: usize = 1 << 22;

/// Serializable description of one layer; the checkpoint manifest stores a list of these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm2d {
        channels: usize,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    Sigmoid,
    Reshape {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl LayerSpec {
    /// Output shape `(c, h, w)` for an input of shape `(c, h, w)`.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        match *self {
            LayerSpec::Linear { inputs, outputs } => {
                if c * h * w != inputs {
                    return Err(Error::Shape(format!(
                        "linear layer expects {inputs} features, got {c}x{h}x{w}"
                    )));
                }
                Ok([outputs, 1, 1])
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                if c != in_channels {
                    return Err(Error::Shape(format!(
                        "conv expects {in_channels} channels, got {c}"
                    )));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(Error::Shape(format!(
                        "conv kernel {kernel} larger than padded {h}x{w} input"
                    )));
                }
                Ok([
                    out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::ConvTranspose2d { in_channels, out_channels, kernel, stride, padding } => {
                if c != in_channels {
                    return Err(Error::Shape(format!(
                        "transposed conv expects {in_channels} channels, got {c}"
                    )));
                }
                let ho = ((h - 1) * stride + kernel).checked_sub(2 * padding);
                let wo = ((w - 1) * stride + kernel).checked_sub(2 * padding);
                match (ho, wo) {
                    (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok([out_channels, ho, wo]),
                    _ => Err(Error::Shape("transposed conv output is empty".into())),
                }
            }
            LayerSpec::BatchNorm2d { channels } => {
                if c != channels {
                    return Err(Error::Shape(format!(
                        "batch norm expects {channels} channels, got {c}"
                    )));
                }
                Ok(input)
            }
            LayerSpec::Reshape { channels, height, width } => {
                if channels * height * width != c * h * w {
                    return Err(Error::Shape(format!(
                        "cannot reshape {c}x{h}x{w} into {channels}x{height}x{width}"
                    )));
                }
                Ok([channels, height, width])
            }
            LayerSpec::Relu | LayerSpec::LeakyRelu { .. } | LayerSpec::Tanh | LayerSpec::Sigmoid => {
                Ok(input)
            }
        }
    }

    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>, bool)> {
        match *self {
            LayerSpec::Linear { inputs, outputs } => vec![
                ("weight", vec![outputs, inputs], true),
                ("bias", vec![outputs], true),
            ],
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => vec![
                ("weight", vec![out_channels, in_channels, kernel, kernel], true),
                ("bias", vec![out_channels], true),
            ],
            LayerSpec::ConvTranspose2d { in_channels, out_channels, kernel, .. } => vec![
                ("weight", vec![in_channels, out_channels, kernel, kernel], true),
                ("bias", vec![out_channels], true),
            ],
            LayerSpec::BatchNorm2d { channels } => vec![
                ("gamma", vec![channels], true),
                ("beta", vec![channels], true),
                ("running_mean", vec![channels], false),
                ("running_var", vec![channels], false),
            ],
            _ => Vec::new(),
        }
    }
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// N(0, 0.02) weights, N(1, 0.02) batch-norm scales.
    Dcgan,
    /// N(0, 2/fan_in) weights, unit batch-norm scales.
    He,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// Buffers (batch-norm running statistics) are stored but never optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub params: Vec<Param<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer activations kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) enum Cache<T> {
    Input(Tensor<T>),
    Output(Tensor<T>),
    Norm {
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
    },
    Shape([usize; 4]),
    Eval,
}

impl<T: Scalar> Layer<T> {
    pub fn new(spec: LayerSpec, init: Init, rng: &mut impl Rng) -> Self {
        let fan_in = match spec {
            LayerSpec::Linear { inputs, .. } => inputs,
            LayerSpec::Conv2d { in_channels, kernel, .. } => in_channels * kernel * kernel,
            LayerSpec::ConvTranspose2d { in_channels, kernel, stride, .. } => {
                (in_channels * kernel * kernel / (stride * stride)).max(1)
            }
            _ => 1,
        };
        let weight_std = match init {
            Init::Dcgan => 0.02,
            Init::He => (2.0 / fan_in as f64).sqrt(),
        };
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape, trainable)| {
                let len: usize = shape.iter().product();
                let data = match name {
                    "weight" => sample_normal(rng, 0.0, weight_std, len),
                    "gamma" if init == Init::Dcgan => sample_normal(rng, 1.0, 0.02, len),
                    "gamma" | "running_var" => vec![T::one(); len],
                    _ => vec![T::zero(); len],
                };
                Param { name, shape, data, trainable }
            })
            .collect();
        Self { spec, params }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>, mode: Mode, record: bool) -> Result<(Tensor<T>, Cache<T>)> {
        let [c, h, w] = self.spec.output_shape([x.shape[1], x.shape[2], x.shape[3]])?;
        let n = x.batch();
        let out_shape = [n, c, h, w];
        let keep_input = |x: &Tensor<T>| if record { Cache::Input(x.clone()) } else { Cache::Eval };
        match self.spec {
            LayerSpec::Linear { inputs, outputs } => {
                let (wt, b) = (&self.params[0].data, &self.params[1].data);
                let mut y = Tensor::zeros(out_shape);
                for i in 0..n {
                    y.data[i * outputs..(i + 1) * outputs].copy_from_slice(b);
                }
                gemm(
                    T::one(),
                    MatRef::new(&x.data, n, inputs),
                    MatRef::new(wt, outputs, inputs).t(),
                    T::one(),
                    &mut y.data,
                    outputs,
                );
                Ok((y, keep_input(x)))
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let g = ConvGeom {
                    c: in_channels,
                    h: x.shape[2],
                    w: x.shape[3],
                    k: kernel,
                    s: stride,
                    p: padding,
                    ho: h,
                    wo: w,
                };
                let (wt, b) = (&self.params[0].data, &self.params[1].data);
                let mut y = Tensor::zeros(out_shape);
                let plen = g.patch_len();
                let band = (IM2COL_BUDGET / (plen * w).max(1)).clamp(1, h);
                let mut cols = vec![T::zero(); plen * band * w];
                let out_len = out_channels * h * w;
                for i in 0..n {
                    let yi = &mut y.data[i * out_len..(i + 1) * out_len];
                    for oc in 0..out_channels {
                        yi[oc * h * w..(oc + 1) * h * w].fill(b[oc]);
                    }
                    let mut oy0 = 0;
                    while oy0 < h {
                        let oy1 = (oy0 + band).min(h);
                        let width = (oy1 - oy0) * w;
                        im2col(x.item(i), &g, oy0, oy1, &mut cols);
                        gemm(
                            T::one(),
                            MatRef::new(wt, out_channels, plen),
                            MatRef::new(&cols[..plen * width], plen, width),
                            T::one(),
                            &mut yi[oy0 * w..],
                            h * w,
                        );
                        oy0 = oy1;
                    }
                }
                Ok((y, keep_input(x)))
            }
            LayerSpec::ConvTranspose2d { in_channels, out_channels, kernel, stride, padding } => {
                let g = ConvGeom {
                    c: out_channels,
                    h,
                    w,
                    k: kernel,
                    s: stride,
                    p: padding,
                    ho: x.shape[2],
                    wo: x.shape[3],
                };
                let (wt, b) = (&self.params[0].data, &self.params[1].data);
                let hw_in = g.ho * g.wo;
                let plen = g.patch_len();
                let mut cols = vec![T::zero(); plen * hw_in];
                let mut y = Tensor::zeros(out_shape);
                let out_len = out_channels * h * w;
                for i in 0..n {
                    gemm(
                        T::one(),
                        MatRef::new(wt, in_channels, plen).t(),
                        MatRef::new(x.item(i), in_channels, hw_in),
                        T::zero(),
                        &mut cols,
                        hw_in,
                    );
                    let yi = &mut y.data[i * out_len..(i + 1) * out_len];
                    col2im(&cols, &g, yi);
                    for oc in 0..out_channels {
                        for v in &mut yi[oc * h * w..(oc + 1) * h * w] {
                            *v += b[oc];
                        }
                    }
                }
                Ok((y, keep_input(x)))
            }
            LayerSpec::BatchNorm2d { channels } => self.batch_norm(x, channels, mode, record),
            LayerSpec::Relu => Ok((x.map(|v| v.max(T::zero())), keep_input(x))),
            LayerSpec::LeakyRelu { slope } => {
                let slope = T::lit(slope);
                Ok((x.map(|v| if v > T::zero() { v } else { v * slope }), keep_input(x)))
            }
            LayerSpec::Tanh => {
                let y = x.map(|v| v.tanh());
                let cache = if record { Cache::Output(y.clone()) } else { Cache::Eval };
                Ok((y, cache))
            }
            LayerSpec::Sigmoid => {
                let y = x.map(sigmoid);
                let cache = if record { Cache::Output(y.clone()) } else { Cache::Eval };
                Ok((y, cache))
            }
            LayerSpec::Reshape { .. } => Ok((
                Tensor { shape: out_shape, data: x.data.clone() },
                Cache::Shape(x.shape),
            )),
        }
    }

    fn batch_norm(&self, x: &Tensor<T>, channels: usize, mode: Mode, record: bool) -> Result<(Tensor<T>, Cache<T>)> {
        let [n, _, h, w] = x.shape;
        let hw = h * w;
        let m = n * hw;
        let gamma = &self.params[0].data;
        let beta = &self.params[1].data;
        let (mean, var) = match mode {
            Mode::Eval => (self.params[2].data.clone(), self.params[3].data.clone()),
            Mode::Train => {
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                for ch in 0..channels {
                    let mut s = 0.0f64;
                    for i in 0..n {
                        s += x.data[(i * channels + ch) * hw..][..hw].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut ss = 0.0f64;
                    for i in 0..n {
                        ss += x.data[(i * channels + ch) * hw..][..hw]
                            .iter()
                            .map(|v| (v.as_f64() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = T::lit(mu);
                    var[ch] = T::lit(ss / m as f64);
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::lit(BN_EPS)).sqrt().recip()).collect();
        let mut xhat = Tensor::zeros(x.shape);
        let mut y = Tensor::zeros(x.shape);
        for i in 0..n {
            for ch in 0..channels {
                let off = (i * channels + ch) * hw;
                for j in off..off + hw {
                    let xh = (x.data[j] - mean[ch]) * inv_std[ch];
                    xhat.data[j] = xh;
                    y.data[j] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        let cache = if record && mode == Mode::Train {
            Cache::Norm { xhat, inv_std, mean, var }
        } else {
            Cache::Eval
        };
        Ok((y, cache))
    }

    /// Propagates `dy` through the layer, accumulating parameter gradients into `grads`
    /// (one buffer per entry of `self.params`) when given.
    pub(crate) fn backward(&self, cache: &Cache<T>, dy: &Tensor<T>, grads: Option<&mut [Vec<T>]>) -> Tensor<T> {
        let n = dy.batch();
        match (&self.spec, cache) {
            (&LayerSpec::Linear { inputs, outputs }, Cache::Input(x)) => {
                if let Some(g) = grads {
                    let (gw, rest) = g.split_at_mut(1);
                    gemm(
                        T::one(),
                        MatRef::new(&dy.data, n, outputs).t(),
                        MatRef::new(&x.data, n, inputs),
                        T::one(),
                        &mut gw[0],
                        inputs,
                    );
                    for i in 0..n {
                        for (gb, &d) in rest[0].iter_mut().zip(&dy.data[i * outputs..(i + 1) * outputs]) {
                            *gb += d;
                        }
                    }
                }
                let mut dx = Tensor::zeros(x.shape);
                gemm(
                    T::one(),
                    MatRef::new(&dy.data, n, outputs),
                    MatRef::new(&self.params[0].data, outputs, inputs),
                    T::zero(),
                    &mut dx.data,
                    inputs,
                );
                dx
            }
            (&LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding }, Cache::Input(x)) => {
                let [_, _, h, w] = dy.shape;
                let g = ConvGeom {
                    c: in_channels,
                    h: x.shape[2],
                    w: x.shape[3],
                    k: kernel,
                    s: stride,
                    p: padding,
                    ho: h,
                    wo: w,
                };
                let plen = g.patch_len();
                let hw = h * w;
                let wt = &self.params[0].data;
                let mut cols = vec![T::zero(); plen * hw];
                let mut dx = Tensor::zeros(x.shape);
                let mut grads = grads;
                for i in 0..n {
                    let dyi = dy.item(i);
                    if let Some(gr) = grads.as_deref_mut() {
                        im2col(x.item(i), &g, 0, h, &mut cols);
                        let (gw, rest) = gr.split_at_mut(1);
                        gemm(
                            T::one(),
                            MatRef::new(dyi, out_channels, hw),
                            MatRef::new(&cols, plen, hw).t(),
                            T::one(),
                            &mut gw[0],
                            plen,
                        );
                        for oc in 0..out_channels {
                            rest[0][oc] += dyi[oc * hw..(oc + 1) * hw].iter().copied().sum();
                        }
                    }
                    gemm(
                        T::one(),
                        MatRef::new(wt, out_channels, plen).t(),
                        MatRef::new(dyi, out_channels, hw),
                        T::zero(),
                        &mut cols,
                        hw,
                    );
                    let len = dx.item_len();
                    col2im(&cols, &g, &mut dx.data[i * len..(i + 1) * len]);
                }
                dx
            }
            (&LayerSpec::ConvTranspose2d { in_channels, out_channels, kernel, stride, padding }, Cache::Input(x)) => {
                let [_, _, h, w] = dy.shape;
                let g = ConvGeom {
                    c: out_channels,
                    h,
                    w,
                    k: kernel,
                    s: stride,
                    p: padding,
                    ho: x.shape[2],
                    wo: x.shape[3],
                };
                let plen = g.patch_len();
                let hw_in = g.ho * g.wo;
                let wt = &self.params[0].data;
                let mut cols = vec![T::zero(); plen * hw_in];
                let mut dx = Tensor::zeros(x.shape);
                let mut grads = grads;
                let len = dx.item_len();
                for i in 0..n {
                    let dyi = dy.item(i);
                    im2col(dyi, &g, 0, g.ho, &mut cols);
                    if let Some(gr) = grads.as_deref_mut() {
                        let (gw, rest) = gr.split_at_mut(1);
                        gemm(
                            T::one(),
                            MatRef::new(x.item(i), in_channels, hw_in),
                            MatRef::new(&cols, plen, hw_in).t(),
                            T::one(),
                            &mut gw[0],
                            plen,
                        );
                        for oc in 0..out_channels {
                            rest[0][oc] += dyi[oc * h * w..(oc + 1) * h * w].iter().copied().sum();
                        }
                    }
                    gemm(
                        T::one(),
                        MatRef::new(wt, in_channels, plen),
                        MatRef::new(&cols, plen, hw_in),
                        T::zero(),
                        &mut dx.data[i * len..(i + 1) * len],
                        hw_in,
                    );
                }
                dx
            }
            (&LayerSpec::BatchNorm2d { channels }, Cache::Norm { xhat, inv_std, .. }) => {
                let [_, _, h, w] = dy.shape;
                let hw = h * w;
                let m = T::lit((n * hw) as f64);
                let gamma = &self.params[0].data;
                let mut dx = Tensor::zeros(dy.shape);
                let mut grads = grads;
                for ch in 0..channels {
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xhat = T::zero();
                    for i in 0..n {
                        let off = (i * channels + ch) * hw;
                        for j in off..off + hw {
                            sum_dy += dy.data[j];
                            sum_dy_xhat += dy.data[j] * xhat.data[j];
                        }
                    }
                    if let Some(g) = grads.as_deref_mut() {
                        g[0][ch] += sum_dy_xhat;
                        g[1][ch] += sum_dy;
                    }
                    let scale = gamma[ch] * inv_std[ch] / m;
                    for i in 0..n {
                        let off = (i * channels + ch) * hw;
                        for j in off..off + hw {
                            dx.data[j] = scale * (m * dy.data[j] - sum_dy - xhat.data[j] * sum_dy_xhat);
                        }
                    }
                }
                dx
            }
            (LayerSpec::Relu, Cache::Input(x)) => zip_map(dy, x, |d, v| if v > T::zero() { d } else { T::zero() }),
            (&LayerSpec::LeakyRelu { slope }, Cache::Input(x)) => {
                let slope = T::lit(slope);
                zip_map(dy, x, |d, v| if v > T::zero() { d } else { d * slope })
            }
            (LayerSpec::Tanh, Cache::Output(y)) => zip_map(dy, y, |d, t| d * (T::one() - t * t)),
            (LayerSpec::Sigmoid, Cache::Output(y)) => zip_map(dy, y, |d, s| d * s * (T::one() - s)),
            (LayerSpec::Reshape { .. }, Cache::Shape(shape)) => Tensor {
                shape: *shape,
                data: dy.data.clone(),
            },
            (spec, _) => panic!("backward through {spec:?} without a training cache"),
        }
    }
}

fn zip_map<T: Scalar>(dy: &Tensor<T>, v: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        shape: dy.shape,
        data: dy.data.iter().zip(&v.data).map(|(&d, &x)| f(d, x)).collect(),
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn sample_normal<T: Scalar>(rng: &mut impl Rng, mean: f64, std: f64, len: usize) -> Vec<T> {
    let dist = Normal::new(mean, std).expect("finite normal parameters");
    (0..len).map(|_| T::lit(dist.sample(rng))).collect()
}
