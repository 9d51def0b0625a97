//! Toy pixel-space DDPM.

pub mod checkpoint;
pub mod denoiser;
pub mod sample;
pub mod schedule;
pub mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use denoiser::{
    as_batch, batch_images, timestep_embedding, Bound, Denoiser, DenoiserConfig, DenoiserPass,
    FeatureSet, DECODER_LAYERS,
};
pub use sample::sample;
pub use schedule::{forward_sample, mix, predict_x0, NoiseSchedule};
pub use train::{
    denoising_loss, finetune, fixed_eval_loss, train, training_loss, LossPass, TrainConfig,
    TrainItem, Trainer,
};
