use serde::{Deserialize, Serialize};

use super::{Grads, Scalar, Sequential};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for one [`Sequential`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: i32,
    m: Grads<T>,
    v: Grads<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &Sequential<T>, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: net.zero_grads(),
            v: net.zero_grads(),
        }
    }

    pub fn step(&mut self, net: &mut Sequential<T>, grads: &Grads<T>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let lr = T::lit(c.learning_rate * bc2.sqrt() / bc1);
        let (b1, b2, eps) = (T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps * bc2.sqrt()));
        for (li, layer) in net.layers.iter_mut().enumerate() {
            for (pi, p) in layer.params.iter_mut().enumerate() {
                if !p.trainable {
                    continue;
                }
                let g = &grads.layers[li][pi];
                let m = &mut self.m.layers[li][pi];
                let v = &mut self.v.layers[li][pi];
                for j in 0..p.data.len() {
                    m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                    v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                    p.data[j] -= lr * m[j] / (v[j].sqrt() + eps);
                }
            }
        }
    }
}
