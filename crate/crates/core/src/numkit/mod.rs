//! Deterministic numerical kernel: finite vectors, a small tanh perceptron
//! with hand-written reverse-mode gradients, Adam, and splittable random
//! streams.

mod mlp;
mod optim;
mod rng;
mod vector;

pub use mlp::{loss_and_grad, mlp_forward, Activation, ForwardCache, MlpParams};
pub use optim::{opt_step, AdamConfig, OptState};
pub use rng::RngStream;
pub use vector::{sq_dist, RealVec};
