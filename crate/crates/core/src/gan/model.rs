use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{from_batch, to_batch, ImageTensor};
use crate::nn::{Grads, Init, LayerSpec, Mode, Scalar, Sequential, Tape, Tensor};

/// Logits are clipped here before the sigmoid so confidences stay strictly inside (0, 1).
const LOGIT_CLIP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector {
    pub values: Vec<f32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    /// i.i.d. uniform on `[0, 1)`.
    #[default]
    Uniform,
    /// i.i.d. standard normal.
    Gaussian,
}

pub fn sample_noise(n: usize, dim: usize, seed: u64) -> Result<Vec<NoiseVector>> {
    sample_noise_with(n, dim, seed, NoiseDistribution::Uniform)
}

pub fn sample_noise_with(n: usize, dim: usize, seed: u64, dist: NoiseDistribution) -> Result<Vec<NoiseVector>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_noise_rng(n, dim, &mut rng, dist)
}

pub(crate) fn sample_noise_rng(n: usize, dim: usize, rng: &mut impl Rng, dist: NoiseDistribution) -> Result<Vec<NoiseVector>> {
    if n == 0 || dim == 0 {
        return Err(Error::Argument(format!("noise batch needs n >= 1 and dim >= 1, got {n}x{dim}")));
    }
    Ok((0..n)
        .map(|_| NoiseVector {
            values: (0..dim)
                .map(|_| match dist {
                    NoiseDistribution::Uniform => rng.random::<f32>(),
                    NoiseDistribution::Gaussian => StandardNormal.sample(rng),
                })
                .collect(),
        })
        .collect())
}

/// Generator topology.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GeneratorArch {
    /// Noise projected to `widths[0] x b x b`, then one stride-2 up-convolution per
    /// remaining width plus a final one to `channels`, where `b = image_size / 2^len(widths)`.
    Latent {
        noise_dim: usize,
        image_size: usize,
        channels: usize,
        widths: Vec<usize>,
    },
    /// Stride-1 3x3 residual refiner applied to a bilinearly resized input:
    /// `clamp(x + tanh(r(x)), -1, 1)`. Fully convolutional, so any frame size works;
    /// `output_width x output_height` is the training resolution.
    Conditional {
        channels: usize,
        hidden: Vec<usize>,
        output_width: usize,
        output_height: usize,
    },
}

impl GeneratorArch {
    pub fn dcgan() -> Self {
        GeneratorArch::Latent {
            noise_dim: 100,
            image_size: 32,
            channels: 3,
            widths: vec![256, 128, 64],
        }
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self, GeneratorArch::Conditional { .. })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match *self {
            GeneratorArch::Latent { noise_dim, .. } => [noise_dim, 1, 1],
            GeneratorArch::Conditional { channels, output_width, output_height, .. } => {
                [channels, output_height, output_width]
            }
        }
    }

    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        match self {
            GeneratorArch::Latent { noise_dim, image_size, channels, widths } => {
                if widths.is_empty() || *noise_dim == 0 || *channels == 0 {
                    return Err(Error::Argument("latent generator needs widths, noise and channels".into()));
                }
                let up = 1usize << widths.len();
                if *image_size % up != 0 || *image_size < up {
                    return Err(Error::Argument(format!(
                        "image size {image_size} is not a multiple of 2^{}",
                        widths.len()
                    )));
                }
                let base = image_size / up;
                let mut specs = vec![
                    LayerSpec::Linear { inputs: *noise_dim, outputs: widths[0] * base * base },
                    LayerSpec::Reshape { channels: widths[0], height: base, width: base },
                    LayerSpec::BatchNorm2d { channels: widths[0] },
                    LayerSpec::Relu,
                ];
                for pair in widths.windows(2) {
                    specs.push(up_conv(pair[0], pair[1]));
                    specs.push(LayerSpec::BatchNorm2d { channels: pair[1] });
                    specs.push(LayerSpec::Relu);
                }
                specs.push(up_conv(*widths.last().unwrap(), *channels));
                specs.push(LayerSpec::Tanh);
                Ok(specs)
            }
            GeneratorArch::Conditional { channels, hidden, output_width, output_height } => {
                if *channels == 0 || *output_width == 0 || *output_height == 0 {
                    return Err(Error::Argument("conditional generator needs channels and an output size".into()));
                }
                let mut specs = Vec::new();
                let mut prev = *channels;
                for &h in hidden {
                    specs.push(same_conv(prev, h));
                    specs.push(LayerSpec::Relu);
                    prev = h;
                }
                specs.push(same_conv(prev, *channels));
                specs.push(LayerSpec::Tanh);
                Ok(specs)
            }
        }
    }
}

fn up_conv(i: usize, o: usize) -> LayerSpec {
    LayerSpec::ConvTranspose2d { in_channels: i, out_channels: o, kernel: 4, stride: 2, padding: 1 }
}

fn same_conv(i: usize, o: usize) -> LayerSpec {
    LayerSpec::Conv2d { in_channels: i, out_channels: o, kernel: 3, stride: 1, padding: 1 }
}

pub enum GeneratorInput<'a> {
    Noise(&'a [NoiseVector]),
    Images(&'a [ImageTensor]),
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub arch: GeneratorArch,
    pub net: Sequential<T>,
}

/// Recorded generator forward pass.
pub struct GeneratorTape<T> {
    tape: Tape<T>,
    /// Conditional mode: 1 where the residual sum was inside [-1, 1].
    pass: Option<Vec<bool>>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(arch: GeneratorArch, rng: &mut impl Rng) -> Result<Self> {
        let init = if arch.is_conditional() { Init::He } else { Init::Dcgan };
        let net = Sequential::new(arch.input_shape(), &arch.layer_specs()?, init, rng)?;
        let mut g = Self { arch, net };
        if g.arch.is_conditional() {
            // Refinement starts from the identity so training can only move away from
            // plain bilinear resizing when the loss says so.
            g.zero_final_layer();
        }
        Ok(g)
    }

    /// Rebuilds a generator around existing weights; the layer list must match `arch`.
    pub fn from_parts(arch: GeneratorArch, net: Sequential<T>) -> Result<Self> {
        if net.specs() != arch.layer_specs()? || net.input_shape != arch.input_shape() {
            return Err(Error::Shape("generator weights do not match the architecture".into()));
        }
        Ok(Self { arch, net })
    }

    /// Zeroes the weights and bias of the final convolution. A latent generator then
    /// emits all zeros; a conditional one becomes the identity on its resized input.
    pub fn zero_final_layer(&mut self) {
        let last = self.net.layers.len() - 2;
        for p in &mut self.net.layers[last].params {
            p.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [c, h, w] = self.arch.input_shape();
        let ok = match self.arch {
            GeneratorArch::Latent { .. } => x.shape[1..] == [c, h, w],
            GeneratorArch::Conditional { .. } => x.shape[1] == c,
        };
        if !ok || x.batch() == 0 {
            return Err(Error::Shape(format!(
                "generator input {:?} does not match {:?}",
                x.shape, self.arch
            )));
        }
        Ok(())
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, GeneratorTape<T>)> {
        self.check_input(x)?;
        let (r, tape) = self.net.forward(x, Mode::Train)?;
        if !self.arch.is_conditional() {
            return Ok((r, GeneratorTape { tape, pass: None }));
        }
        let (out, pass) = residual(x, &r);
        Ok((out, GeneratorTape { tape, pass: Some(pass) }))
    }

    /// Gradient of the generator output flows back into `grads`.
    pub fn backward(&self, tape: &GeneratorTape<T>, mut dy: Tensor<T>, grads: &mut Grads<T>) {
        if let Some(pass) = &tape.pass {
            for (g, &p) in dy.data.iter_mut().zip(pass) {
                if !p {
                    *g = T::zero();
                }
            }
        }
        self.net.backward(&tape.tape, dy, Some(grads));
    }

    pub fn update_running_stats(&mut self, tape: &GeneratorTape<T>, momentum: f64) {
        self.net.update_running_stats(&tape.tape, momentum);
    }

    /// Evaluation-mode pass on a prepared NCHW input.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let r = self.net.infer(x)?;
        Ok(if self.arch.is_conditional() { residual(x, &r).0 } else { r })
    }

    /// Converts raw inputs to a network batch. Conditional inputs are resized to the
    /// configured output resolution.
    pub fn prepare(&self, input: GeneratorInput<'_>) -> Result<Tensor<T>> {
        match (&self.arch, input) {
            (GeneratorArch::Latent { noise_dim, .. }, GeneratorInput::Noise(z)) => {
                if z.is_empty() {
                    return Err(Error::Argument("empty noise batch".into()));
                }
                if let Some(v) = z.iter().find(|v| v.values.len() != *noise_dim) {
                    return Err(Error::Shape(format!(
                        "noise of dim {} for a generator expecting {noise_dim}",
                        v.values.len()
                    )));
                }
                let data = z.iter().flat_map(|v| v.values.iter().map(|&x| T::from_f32(x))).collect();
                Ok(Tensor::from_vec([z.len(), *noise_dim, 1, 1], data))
            }
            (GeneratorArch::Conditional { output_width, output_height, .. }, GeneratorInput::Images(imgs)) => {
                let resized: Vec<_> = imgs
                    .iter()
                    .map(|i| i.resize_bilinear(*output_width, *output_height))
                    .collect::<Result<_>>()?;
                to_batch(&resized)
            }
            _ => Err(Error::Argument("generator input kind does not match its mode".into())),
        }
    }
}

fn residual<T: Scalar>(x: &Tensor<T>, r: &Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let one = T::one();
    let mut pass = Vec::with_capacity(x.data.len());
    let data = x
        .data
        .iter()
        .zip(&r.data)
        .map(|(&a, &b)| {
            let s = a + b;
            pass.push(s >= -one && s <= one);
            s.max(-one).min(one)
        })
        .collect();
    (Tensor::from_vec(x.shape, data), pass)
}

impl Generator<f32> {
    /// Applies a conditional generator at the input's own resolution.
    pub fn refine(&self, frame: &ImageTensor) -> Result<ImageTensor> {
        if !self.arch.is_conditional() {
            return Err(Error::Argument("refinement needs a conditional generator".into()));
        }
        let out = self.infer(&to_batch(std::slice::from_ref(frame))?)?;
        Ok(from_batch(&out)?.remove(0))
    }
}

pub fn generator_forward(g: &Generator<f32>, input: GeneratorInput<'_>) -> Result<Vec<ImageTensor>> {
    let x = g.prepare(input)?;
    from_batch(&g.infer(&x)?)
}

/// Discriminator topology: `k4 s2 p1` convolutions over `widths`, leaky ReLU after
/// each, batch norm on all but the first, then a linear head and sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub input_width: usize,
    pub input_height: usize,
    pub channels: usize,
    pub widths: Vec<usize>,
    pub slope: f64,
}

impl DiscriminatorArch {
    pub fn dcgan() -> Self {
        Self {
            input_width: 32,
            input_height: 32,
            channels: 3,
            widths: vec![64, 128, 256],
            slope: 0.2,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.input_height, self.input_width]
    }

    /// Convolution ladder only; its layers are shared with the detector backbone.
    pub fn ladder_specs(&self) -> Result<Vec<LayerSpec>> {
        if self.widths.is_empty() || self.channels == 0 {
            return Err(Error::Argument("discriminator needs at least one conv width".into()));
        }
        let mut specs = Vec::new();
        let mut prev = self.channels;
        for (i, &w) in self.widths.iter().enumerate() {
            specs.push(LayerSpec::Conv2d { in_channels: prev, out_channels: w, kernel: 4, stride: 2, padding: 1 });
            if i > 0 {
                specs.push(LayerSpec::BatchNorm2d { channels: w });
            }
            specs.push(LayerSpec::LeakyRelu { slope: self.slope });
            prev = w;
        }
        Ok(specs)
    }

    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        let mut specs = self.ladder_specs()?;
        let mut shape = self.input_shape();
        for s in &specs {
            shape = s.output_shape(shape)?;
        }
        let [c, h, w] = shape;
        specs.extend([
            LayerSpec::Reshape { channels: c * h * w, height: 1, width: 1 },
            LayerSpec::Linear { inputs: c * h * w, outputs: 1 },
            LayerSpec::Sigmoid,
        ]);
        Ok(specs)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub arch: DiscriminatorArch,
    pub net: Sequential<T>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(arch: DiscriminatorArch, rng: &mut impl Rng) -> Result<Self> {
        let net = Sequential::new(arch.input_shape(), &arch.layer_specs()?, Init::Dcgan, rng)?;
        Ok(Self { arch, net })
    }

    pub fn from_parts(arch: DiscriminatorArch, net: Sequential<T>) -> Result<Self> {
        if net.specs() != arch.layer_specs()? || net.input_shape != arch.input_shape() {
            return Err(Error::Shape("discriminator weights do not match the architecture".into()));
        }
        Ok(Self { arch, net })
    }

    /// Zeroes the linear head so every confidence is exactly 0.5.
    pub fn zero_head(&mut self) {
        let head = self.net.layers.len() - 2;
        for p in &mut self.net.layers[head].params {
            p.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Indices of the post-activation outputs of each convolution stage.
    pub fn conv_taps(&self) -> Vec<usize> {
        self.net
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.spec, LayerSpec::LeakyRelu { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn ladder_len(&self) -> usize {
        self.conv_taps().last().map_or(0, |i| i + 1)
    }

    pub(crate) fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape[1..] != self.arch.input_shape() {
            return Err(Error::Shape(format!(
                "discriminator expects {:?} inputs, got {:?}",
                self.arch.input_shape(),
                &x.shape[1..]
            )));
        }
        Ok(())
    }

    /// Evaluation-mode confidences, computed from the head logit in double precision.
    pub fn confidences(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let head = self.net.layers.len() - 2;
        let mut logits = Vec::new();
        self.net.infer_with(x, |i, t| {
            if i == head {
                logits = t.data.iter().map(|v| v.as_f64()).collect();
            }
        })?;
        Ok(logits.into_iter().map(confidence_from_logit).collect())
    }
}

pub(crate) fn confidence_from_logit(l: f64) -> f64 {
    let l = if l.is_nan() { 0.0 } else { l.clamp(-LOGIT_CLIP, LOGIT_CLIP) };
    1.0 / (1.0 + (-l).exp())
}

pub fn discriminator_forward(d: &Discriminator<f32>, images: &[ImageTensor]) -> Result<Vec<f64>> {
    d.confidences(&to_batch(images)?)
}
