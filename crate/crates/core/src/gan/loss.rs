//! Adversarial objectives on discriminator confidences. Natural logs throughout;
//! confidences are clamped `EPS` away from 0 and 1 before taking logs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLossVariant {
    /// `mean log(1 - D(G(z)))`, the minimax form.
    Saturating,
    /// `-mean log D(G(z))`.
    #[default]
    NonSaturating,
}

fn check(conf: &[f64], what: &str) -> Result<()> {
    if conf.is_empty() {
        return Err(Error::Argument(format!("empty {what} confidence batch")));
    }
    if let Some(c) = conf.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::Argument(format!("{what} confidence {c} outside [0, 1]")));
    }
    Ok(())
}

/// `(log c, d/dc log c)` with clamping; the derivative vanishes where the clamp is active.
fn log_clamped(c: f64) -> (f64, f64) {
    let cc = c.clamp(EPS, 1.0 - EPS);
    let d = if c == cc { 1.0 / cc } else { 0.0 };
    (cc.ln(), d)
}

/// Mean of `log c` and its gradient per element.
fn mean_log(conf: &[f64]) -> (f64, Vec<f64>) {
    let n = conf.len() as f64;
    let mut sum = 0.0;
    let grad = conf
        .iter()
        .map(|&c| {
            let (v, d) = log_clamped(c);
            sum += v;
            d / n
        })
        .collect();
    (sum / n, grad)
}

/// Mean of `log(1 - c)` and its gradient per element.
fn mean_log1m(conf: &[f64]) -> (f64, Vec<f64>) {
    let flipped: Vec<f64> = conf.iter().map(|c| 1.0 - c).collect();
    let (v, g) = mean_log(&flipped);
    (v, g.into_iter().map(|d| -d).collect())
}

/// Empirical value function `mean log D(real) + mean log(1 - D(fake))`.
pub fn gan_value(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    check(d_real, "real")?;
    check(d_fake, "fake")?;
    Ok(mean_log(d_real).0 + mean_log1m(d_fake).0)
}

/// Negated value function; minimizing it maximizes the discriminator's objective.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    Ok(-gan_value(d_real, d_fake)?)
}

/// Discriminator loss with its gradients with respect to both confidence batches.
pub fn discriminator_loss_grad(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check(d_real, "real")?;
    check(d_fake, "fake")?;
    let (vr, gr) = mean_log(d_real);
    let (vf, gf) = mean_log1m(d_fake);
    Ok((
        -(vr + vf),
        gr.into_iter().map(|g| -g).collect(),
        gf.into_iter().map(|g| -g).collect(),
    ))
}

pub fn generator_loss(d_fake: &[f64], variant: GeneratorLossVariant) -> Result<f64> {
    Ok(generator_loss_grad(d_fake, variant)?.0)
}

pub fn generator_loss_grad(d_fake: &[f64], variant: GeneratorLossVariant) -> Result<(f64, Vec<f64>)> {
    check(d_fake, "fake")?;
    Ok(match variant {
        GeneratorLossVariant::Saturating => mean_log1m(d_fake),
        GeneratorLossVariant::NonSaturating => {
            let (v, g) = mean_log(d_fake);
            (-v, g.into_iter().map(|d| -d).collect())
        }
    })
}

/// Mean absolute error and its gradient with respect to `output`.
pub(crate) fn l1_grad(output: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = output.len() as f64;
    let mut sum = 0.0;
    let grad = output
        .iter()
        .zip(target)
        .map(|(o, t)| {
            let d = o - t;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    (sum / n, grad)
}

/// `rec_weight * MAE(output, target) + adv_weight * non-saturating generator loss`.
pub fn enhancement_loss(
    output: &[ImageTensor],
    target: &[ImageTensor],
    d_fake: &[f64],
    rec_weight: f64,
    adv_weight: f64,
) -> Result<f64> {
    if output.len() != target.len() || output.iter().zip(target).any(|(a, b)| !a.same_shape(b)) {
        return Err(Error::Shape("enhanced and target batches differ in shape".into()));
    }
    if rec_weight < 0.0 || adv_weight < 0.0 {
        return Err(Error::Argument("loss weights must be non-negative".into()));
    }
    let flat = |imgs: &[ImageTensor]| -> Vec<f64> {
        imgs.iter().flat_map(|i| i.data().iter().map(|&v| v as f64)).collect()
    };
    let (mae, _) = l1_grad(&flat(output), &flat(target));
    let adv = generator_loss(d_fake, GeneratorLossVariant::NonSaturating)?;
    Ok(rec_weight * mae + adv_weight * adv)
}
