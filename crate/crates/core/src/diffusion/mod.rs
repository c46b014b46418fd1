//! Pixel-space video diffusion: noise schedule, denoiser, guidance branch,
//! masked training objective, DDIM sampler and checkpoints.

pub mod checkpoint;
pub mod guidance;
pub mod loss;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod train;
pub mod unet;

pub use model::{ClipCondition, ModelConfig, TrainingClip, VideoModel};
pub use schedule::NoiseSchedule;
pub use train::{TrainConfig, Trainer};
