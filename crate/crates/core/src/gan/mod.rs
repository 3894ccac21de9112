//! Adversarial networks: the noise-to-image DCGAN used for representation learning
//! and the conditional refiner used for frame enhancement.

mod loss;
mod model;
mod train;

pub use loss::{
    discriminator_loss, discriminator_loss_grad, enhancement_loss, gan_value, generator_loss, generator_loss_grad,
    GeneratorLossVariant, EPS,
};
pub use model::{
    discriminator_forward, generator_forward, sample_noise, sample_noise_with, Discriminator, DiscriminatorArch,
    Generator, GeneratorArch, GeneratorInput, GeneratorTape, NoiseDistribution, NoiseVector,
};
pub use train::{
    discriminator_pass, generator_objective, train_gan, write_loss_csv, DiscriminatorPass, DiscriminatorStep,
    EpochSummary, GanRun, GanTrainConfig, GanTrainer, LossRecord,
};
