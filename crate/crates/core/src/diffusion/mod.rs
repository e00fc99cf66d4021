//! Minimal conditional denoising diffusion over d-dimensional points.
//!
//! The network predicts the clean point x0 directly from
//! `[x_t || time features || condition embedding]`; training minimises the
//! (optionally weighted) squared x0 error with unit time weighting, and
//! generation runs the ancestral posterior with x0 parameterisation.

mod model;
mod objective;
mod sampler;
mod schedule;
mod train;

pub use model::{time_features, DenoiserModel, ModelConfig, ModelGrads};
pub use objective::{diffusion_loss, forward_noise, noise_with, unweighted_loss, TrainExample};
pub use sampler::{generate, generate_batch};
pub use schedule::{make_schedule, NoiseSchedule};
pub use train::{train, TrainConfig, TrainReport};

/// Index into the world's condition table (and the model's embedding table).
pub type ConditionId = usize;
