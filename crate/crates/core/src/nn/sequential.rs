use rand::Rng;

use super::layer::{Cache, Init, Layer, LayerSpec, Mode, Param};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A feed-forward stack of layers with an explicit backward pass.
#[derive(Clone, Debug)]
pub struct Sequential<T> {
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer<T>>,
}

/// Activations recorded by a training forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

/// Gradient buffers laid out like `Sequential::layers[..].params[..]`; buffers of
/// non-trainable params are empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub layers: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn scale(&mut self, s: T) {
        self.layers.iter_mut().flatten().flatten().for_each(|g| *g *= s);
    }

    pub fn add(&mut self, other: &Grads<T>) {
        for (a, b) in self.layers.iter_mut().flatten().zip(other.layers.iter().flatten()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
}

impl<T: Scalar> Sequential<T> {
    pub fn new(input_shape: [usize; 3], specs: &[LayerSpec], init: Init, rng: &mut impl Rng) -> Result<Self> {
        validate(input_shape, specs)?;
        Ok(Self {
            input_shape,
            layers: specs.iter().map(|s| Layer::new(s.clone(), init, rng)).collect(),
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn output_shape(&self) -> [usize; 3] {
        validate(self.input_shape, &self.specs()).expect("validated at construction")
    }

    /// Shapes `(c, h, w)` of every layer output for a given input shape.
    pub fn shapes_for(&self, input: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        let mut shape = input;
        self.layers
            .iter()
            .map(|l| {
                shape = l.spec.output_shape(shape)?;
                Ok(shape)
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    /// `(qualified name, param)` pairs, e.g. `"3.weight"`.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params.iter().map(move |p| (format!("{i}.{}", p.name), p)))
            .collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [c, _, _] = self.input_shape;
        if x.shape[1] != c {
            return Err(Error::Shape(format!(
                "network expects {c} input channels, got {}",
                x.shape[1]
            )));
        }
        Ok(())
    }

    /// Training forward pass; the returned tape feeds [`Sequential::backward`].
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&cur, mode, true)?;
            caches.push(cache);
            cur = y;
        }
        Ok((cur, Tape { caches }))
    }

    /// Inference pass in evaluation mode; `visit` sees every layer output.
    pub fn infer_with(&self, x: &Tensor<T>, mut visit: impl FnMut(usize, &Tensor<T>)) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(&cur, Mode::Eval, false)?.0;
            visit(i, &cur);
        }
        Ok(cur)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_with(x, |_, _| {})
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.params
                        .iter()
                        .map(|p| if p.trainable { vec![T::zero(); p.data.len()] } else { Vec::new() })
                        .collect()
                })
                .collect(),
        }
    }

    /// Back-propagates `dy` through the recorded tape and returns the input gradient.
    /// Parameter gradients are accumulated into `grads` when given.
    pub fn backward(&self, tape: &Tape<T>, dy: Tensor<T>, mut grads: Option<&mut Grads<T>>) -> Tensor<T> {
        let mut cur = dy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let g = grads.as_deref_mut().map(|g| g.layers[i].as_mut_slice());
            cur = layer.backward(&tape.caches[i], &cur, g);
        }
        cur
    }

    /// Folds the batch statistics of a training tape into the running estimates.
    pub fn update_running_stats(&mut self, tape: &Tape<T>, momentum: f64) {
        let mom = T::lit(momentum);
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            if let (LayerSpec::BatchNorm2d { .. }, Cache::Norm { mean, var, xhat, .. }) = (&layer.spec, cache) {
                let count = (xhat.shape[0] * xhat.shape[2] * xhat.shape[3]) as f64;
                let unbias = T::lit(if count > 1.0 { count / (count - 1.0) } else { 1.0 });
                for ch in 0..mean.len() {
                    let rm = &mut layer.params[2].data[ch];
                    *rm = (T::one() - mom) * *rm + mom * mean[ch];
                    let rv = &mut layer.params[3].data[ch];
                    *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        Sequential {
            input_shape: self.input_shape,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    params: l
                        .params
                        .iter()
                        .map(|p| Param {
                            name: p.name,
                            shape: p.shape.clone(),
                            data: p.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                            trainable: p.trainable,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

fn validate(input: [usize; 3], specs: &[LayerSpec]) -> Result<[usize; 3]> {
    if input.contains(&0) {
        return Err(Error::Shape(format!("empty input shape {input:?}")));
    }
    specs.iter().try_fold(input, |shape, s| s.output_shape(shape))
}
