//! Denoising diffusion over flattened adapter vectors.

mod checkpoint;
mod denoiser;
mod schedule;
mod train;

pub use checkpoint::{DiffusionCheckpoint, TrainingMeta};
pub use denoiser::{dedupe_steps, hidden_dim, Denoiser, DenoiserConfig, ForwardCache, TimeBias};
pub use schedule::{make_schedule, q_sample, NoiseSchedule};
pub use train::{
    ancestral_sample, denormalize, normalization_stats, normalize, sample_params, train_diffusion,
    DiffusionConfig, SamplerVariance, SecondStage,
};
