//! Forward noising, ancestral sampling, and full-precision training.

mod data;
mod sampler;
mod schedule;
mod train;

pub use data::SyntheticDataset;
pub use sampler::{item_rng, p_sample_step, sample, sample_with, standard_normal};
pub use schedule::NoiseSchedule;
pub use train::{
    diffusion_loss, train_fp, validation_loss, NoisyBatch, TrainOptions, TrainingLog,
};
