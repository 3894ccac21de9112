use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{discriminator_loss_grad, generator_loss_grad, gan_value, l1_grad, GeneratorLossVariant};
use super::model::{sample_noise_rng, Discriminator, DiscriminatorArch, Generator, GeneratorArch, GeneratorInput, GeneratorTape, NoiseDistribution};
use crate::data::epoch_batches;
use crate::error::{Error, Result};
use crate::image::{to_batch, ImageTensor};
use crate::nn::{Adam, AdamConfig, Grads, Mode, Scalar, Sequential, Tape, Tensor};

const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub image_size: usize,
    pub noise_dim: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub generator_loss_variant: GeneratorLossVariant,
    pub reconstruction_weight: f64,
    pub adversarial_weight: f64,
    pub noise_distribution: NoiseDistribution,
    pub generator_widths: Vec<usize>,
    pub discriminator_widths: Vec<usize>,
    /// Hidden widths of the conditional refiner.
    pub refiner_widths: Vec<usize>,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 72,
            epochs: 25,
            image_size: 32,
            noise_dim: 100,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            generator_loss_variant: GeneratorLossVariant::NonSaturating,
            reconstruction_weight: 100.0,
            adversarial_weight: 1.0,
            noise_distribution: NoiseDistribution::Uniform,
            generator_widths: vec![256, 128, 64],
            discriminator_widths: vec![64, 128, 256],
            refiner_widths: vec![32, 32],
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Argument("batch_size and epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Argument("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Argument("optimizer moments must lie in [0, 1)".into()));
        }
        if !(self.reconstruction_weight >= 0.0) || !(self.adversarial_weight >= 0.0) {
            return Err(Error::Argument("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub v_estimate: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut out = String::from("epoch,batch,d_loss,g_loss,v_estimate\n");
    for r in records {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.batch, r.d_loss, r.g_loss, r.v_estimate));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Statistics of one discriminator update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorStep {
    pub loss: f64,
    pub value: f64,
    pub real_mean: f64,
    pub fake_mean: f64,
}

/// Generator, discriminator and their optimizer state.
pub struct GanTrainer {
    pub config: GanTrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
}

fn confidences<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data.iter().map(|v| v.as_f64()).collect()
}

fn as_tensor<T: Scalar>(shape: [usize; 4], v: &[f64]) -> Tensor<T> {
    Tensor::from_vec(shape, v.iter().map(|&x| T::lit(x)).collect())
}

/// Discriminator loss on a real and a fake batch, its parameter gradient, and the
/// real-batch tape used for running statistics.
pub struct DiscriminatorPass<T> {
    pub loss: f64,
    pub real: Vec<f64>,
    pub fake: Vec<f64>,
    pub grads: Grads<T>,
    pub real_tape: Tape<T>,
}

pub fn discriminator_pass<T: Scalar>(net: &Sequential<T>, real: &Tensor<T>, fake: &Tensor<T>) -> Result<DiscriminatorPass<T>> {
    let (cr, real_tape) = net.forward(real, Mode::Train)?;
    let (cf, fake_tape) = net.forward(fake, Mode::Train)?;
    let (real_c, fake_c) = (confidences(&cr), confidences(&cf));
    let (loss, gr, gf) = discriminator_loss_grad(&real_c, &fake_c)?;
    let mut grads = net.zero_grads();
    net.backward(&real_tape, as_tensor(cr.shape, &gr), Some(&mut grads));
    net.backward(&fake_tape, as_tensor(cf.shape, &gf), Some(&mut grads));
    Ok(DiscriminatorPass { loss, real: real_c, fake: fake_c, grads, real_tape })
}

/// Generator objective on a fake batch and its gradient with respect to that batch.
/// With `target` the objective is `rec_weight * MAE + adv_weight * non-saturating`.
pub fn generator_objective<T: Scalar>(
    net: &Sequential<T>,
    fake: &Tensor<T>,
    target: Option<&Tensor<T>>,
    variant: GeneratorLossVariant,
    rec_weight: f64,
    adv_weight: f64,
) -> Result<(f64, Tensor<T>)> {
    let (cf, tape) = net.forward(fake, Mode::Train)?;
    let fake_c = confidences(&cf);
    match target {
        None => {
            let (l, g) = generator_loss_grad(&fake_c, variant)?;
            Ok((l, net.backward(&tape, as_tensor(cf.shape, &g), None)))
        }
        Some(y) => {
            let (adv, g) = generator_loss_grad(&fake_c, GeneratorLossVariant::NonSaturating)?;
            let scaled: Vec<f64> = g.iter().map(|v| v * adv_weight).collect();
            let mut dimg = net.backward(&tape, as_tensor(cf.shape, &scaled), None);
            let (mae, grec) = l1_grad(&confidences(fake), &confidences(y));
            for (a, b) in dimg.data.iter_mut().zip(&grec) {
                *a += T::lit(rec_weight * b);
            }
            Ok((rec_weight * mae + adv_weight * adv, dimg))
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl GanTrainer {
    /// Latent mode when `conditional_output` is `None`, otherwise a refiner trained at
    /// `(width, height)`.
    pub fn new(config: GanTrainConfig, conditional_output: Option<(usize, usize)>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (garch, (w, h)) = match conditional_output {
            None => (
                GeneratorArch::Latent {
                    noise_dim: config.noise_dim,
                    image_size: config.image_size,
                    channels: 3,
                    widths: config.generator_widths.clone(),
                },
                (config.image_size, config.image_size),
            ),
            Some((w, h)) => (
                GeneratorArch::Conditional {
                    channels: 3,
                    hidden: config.refiner_widths.clone(),
                    output_width: w,
                    output_height: h,
                },
                (w, h),
            ),
        };
        let generator = Generator::new(garch, &mut rng)?;
        let darch = DiscriminatorArch {
            input_width: w,
            input_height: h,
            channels: 3,
            widths: config.discriminator_widths.clone(),
            slope: 0.2,
        };
        let discriminator = Discriminator::new(darch, &mut rng)?;
        let opt_g = Adam::new(&generator.net, config.adam());
        let opt_d = Adam::new(&discriminator.net, config.adam());
        Ok(Self { config, generator, discriminator, opt_g, opt_d })
    }

    /// Training-mode discriminator loss on one batch, without updating anything.
    pub fn discriminator_batch_loss(&self, real: &Tensor<f32>, fake: &Tensor<f32>) -> Result<f64> {
        let d = &self.discriminator;
        d.check_input(real)?;
        d.check_input(fake)?;
        let (cr, _) = d.net.forward(real, Mode::Train)?;
        let (cf, _) = d.net.forward(fake, Mode::Train)?;
        Ok(discriminator_loss_grad(&confidences(&cr), &confidences(&cf))?.0)
    }

    /// One update of the discriminator on a real and a (detached) fake batch.
    pub fn discriminator_step(&mut self, real: &Tensor<f32>, fake: &Tensor<f32>) -> Result<DiscriminatorStep> {
        self.discriminator.check_input(real)?;
        self.discriminator.check_input(fake)?;
        let pass = discriminator_pass(&self.discriminator.net, real, fake)?;
        self.opt_d.step(&mut self.discriminator.net, &pass.grads);
        self.discriminator.net.update_running_stats(&pass.real_tape, BN_MOMENTUM);
        Ok(DiscriminatorStep {
            loss: pass.loss,
            value: gan_value(&pass.real, &pass.fake)?,
            real_mean: mean(&pass.real),
            fake_mean: mean(&pass.fake),
        })
    }

    /// One generator update from a recorded forward pass. With `target`, the
    /// reconstruction-weighted enhancement objective is minimized.
    pub fn generator_step(
        &mut self,
        tape: &GeneratorTape<f32>,
        fake: &Tensor<f32>,
        target: Option<&Tensor<f32>>,
    ) -> Result<f64> {
        let c = &self.config;
        let (loss, dfake) = generator_objective(
            &self.discriminator.net,
            fake,
            target,
            c.generator_loss_variant,
            c.reconstruction_weight,
            c.adversarial_weight,
        )?;
        let mut grads = self.generator.net.zero_grads();
        self.generator.backward(tape, dfake, &mut grads);
        self.opt_g.step(&mut self.generator.net, &grads);
        self.generator.update_running_stats(tape, BN_MOMENTUM);
        Ok(loss)
    }
}

/// Per-epoch summary handed to the observer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub batches: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub v_estimate: f64,
    pub d_real_mean: f64,
}

pub struct GanRun {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub log: Vec<LossRecord>,
    pub epochs: Vec<EpochSummary>,
}

/// Alternating training: per batch one discriminator step, then one generator step
/// reusing the generator's forward pass. `paired_targets` switches to conditional
/// enhancement training, with `dataset[i]` the degraded version of `paired_targets[i]`.
/// `observer` runs after every epoch, e.g. to write a checkpoint.
pub fn train_gan(
    config: &GanTrainConfig,
    dataset: &[ImageTensor],
    paired_targets: Option<&[ImageTensor]>,
    mut observer: impl FnMut(&EpochSummary, &GanTrainer) -> Result<()>,
) -> Result<GanRun> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let (mut trainer, inputs, reals) = match paired_targets {
        None => {
            let s = config.image_size;
            if let Some(bad) = dataset.iter().find(|i| (i.width(), i.height(), i.channels()) != (s, s, 3)) {
                return Err(Error::Shape(format!(
                    "training images must be {s}x{s}x3, found {}x{}x{}",
                    bad.width(),
                    bad.height(),
                    bad.channels()
                )));
            }
            (GanTrainer::new(config.clone(), None)?, None, to_batch::<f32>(dataset)?)
        }
        Some(targets) => {
            if targets.len() != dataset.len() {
                return Err(Error::Argument(format!(
                    "{} inputs but {} paired targets",
                    dataset.len(),
                    targets.len()
                )));
            }
            let (w, h) = (targets[0].width(), targets[0].height());
            let trainer = GanTrainer::new(config.clone(), Some((w, h)))?;
            let x = trainer.generator.prepare(GeneratorInput::Images(dataset))?;
            (trainer, Some(x), to_batch::<f32>(targets)?)
        }
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x006e_6f69_7365);
    let gather = |t: &Tensor<f32>, idx: &[usize]| {
        Tensor::stack(&idx.iter().map(|&i| t.slice_batch(i..i + 1)).collect::<Vec<_>>())
    };
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    for epoch in 0..config.epochs {
        let batches = epoch_batches(dataset.len(), config.batch_size, config.seed, true, epoch as u64)?;
        let start = log.len();
        for (bi, idx) in batches.iter().enumerate() {
            let real = gather(&reals, idx);
            let g_in = match &inputs {
                Some(x) => gather(x, idx),
                None => {
                    let z = sample_noise_rng(idx.len(), config.noise_dim, &mut noise_rng, config.noise_distribution)?;
                    trainer.generator.prepare(GeneratorInput::Noise(&z))?
                }
            };
            let (fake, gtape) = trainer.generator.forward_train(&g_in)?;
            let ds = trainer.discriminator_step(&real, &fake)?;
            let target = inputs.as_ref().map(|_| &real);
            let g_loss = trainer.generator_step(&gtape, &fake, target)?;
            if ![ds.loss, g_loss, ds.value].iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {bi} (d_loss {}, g_loss {g_loss})",
                    ds.loss
                )));
            }
            log.push(LossRecord {
                epoch,
                batch: bi,
                d_loss: ds.loss,
                g_loss,
                v_estimate: ds.value,
                d_real_mean: ds.real_mean,
                d_fake_mean: ds.fake_mean,
            });
        }
        let rows = &log[start..];
        let avg = |f: fn(&LossRecord) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
        let summary = EpochSummary {
            epoch,
            batches: rows.len(),
            d_loss: avg(|r| r.d_loss),
            g_loss: avg(|r| r.g_loss),
            v_estimate: avg(|r| r.v_estimate),
            d_real_mean: avg(|r| r.d_real_mean),
        };
        observer(&summary, &trainer)?;
        epochs.push(summary);
    }
    Ok(GanRun {
        generator: trainer.generator,
        discriminator: trainer.discriminator,
        log,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::classification_corpus;

    fn tiny() -> GanTrainConfig {
        GanTrainConfig {
            batch_size: 8,
            epochs: 2,
            image_size: 8,
            noise_dim: 6,
            generator_widths: vec![8, 4],
            discriminator_widths: vec![4, 8],
            refiner_widths: vec![4],
            seed: 11,
            ..GanTrainConfig::default()
        }
    }

    fn corpus(n: usize) -> Vec<ImageTensor> {
        classification_corpus(n, 8, 3).into_iter().map(|(i, _)| i).collect()
    }

    #[test]
    fn rejects_bad_configs() {
        let data = corpus(4);
        for cfg in [
            GanTrainConfig { epochs: 0, ..tiny() },
            GanTrainConfig { batch_size: 0, ..tiny() },
            GanTrainConfig { learning_rate: 0.0, ..tiny() },
        ] {
            assert!(matches!(train_gan(&cfg, &data, None, |_, _| Ok(())), Err(Error::Argument(_))));
        }
        assert!(train_gan(&tiny(), &[], None, |_, _| Ok(())).is_err());
        let wrong = vec![ImageTensor::filled(16, 16, 3, 0.0)];
        assert!(matches!(train_gan(&tiny(), &wrong, None, |_, _| Ok(())), Err(Error::Shape(_))));
    }

    #[test]
    fn one_record_per_batch_and_epoch_callbacks() {
        let data = corpus(20);
        let mut seen = Vec::new();
        let run = train_gan(&tiny(), &data, None, |s, _| {
            seen.push(s.epoch);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, [0, 1]);
        assert_eq!(run.log.len(), 2 * 3);
        assert!(run.log.iter().all(|r| r.d_loss.is_finite() && (r.v_estimate + r.d_loss).abs() < 1e-12));
    }

    #[test]
    fn training_is_deterministic() {
        let data = corpus(12);
        let a = train_gan(&tiny(), &data, None, |_, _| Ok(())).unwrap();
        let b = train_gan(&tiny(), &data, None, |_, _| Ok(())).unwrap();
        assert_eq!(a.log, b.log);
        let pa: Vec<_> = a.generator.net.params().map(|p| p.data.clone()).collect();
        let pb: Vec<_> = b.generator.net.params().map(|p| p.data.clone()).collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn discriminator_step_descends_on_frozen_generator() {
        let cfg = GanTrainConfig { learning_rate: 1e-5, ..tiny() };
        let mut t = GanTrainer::new(cfg, None).unwrap();
        let real = to_batch::<f32>(&corpus(8)).unwrap();
        let z = crate::gan::sample_noise(8, 6, 4).unwrap();
        let fake = t.generator.infer(&t.generator.prepare(GeneratorInput::Noise(&z)).unwrap()).unwrap();
        let before = t.discriminator_batch_loss(&real, &fake).unwrap();
        let step = t.discriminator_step(&real, &fake).unwrap();
        assert!((step.loss - before).abs() < 1e-9);
        let after = t.discriminator_batch_loss(&real, &fake).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn conditional_training_runs() {
        let hi = corpus(6);
        let lo: Vec<_> = hi.iter().map(|i| i.downscale_area(2.0).unwrap()).collect();
        let cfg = GanTrainConfig { epochs: 1, ..tiny() };
        let run = train_gan(&cfg, &lo, Some(&hi), |_, _| Ok(())).unwrap();
        assert!(run.generator.arch.is_conditional());
        assert!(run.log[0].g_loss.is_finite());
        assert!(train_gan(&cfg, &lo, Some(&hi[..3]), |_, _| Ok(())).is_err());
    }
}
