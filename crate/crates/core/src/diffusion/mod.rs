//! Conditional DDPM for T1ce synthesis.

pub mod denoiser;
pub mod process;
pub mod schedule;

pub use denoiser::{predict_noise, Denoiser, DenoiserConfig};
pub use process::{
    clamp_x0, forward_marginal, forward_marginal_batch, forward_step, predict_x0, predict_x0_batch,
    reverse_step,
};
pub use schedule::{build_schedule, NoiseSchedule, ScheduleConfig, ScheduleKind};
pub mod sample;
pub mod train;

pub use sample::{synthesize_batch, synthesize_t1ce, Synthesizer};
pub use train::{train_diffusion, DiffusionCheckpoint, DiffusionSetup, DiffusionTrainConfig};
