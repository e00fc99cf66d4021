//! Desk-scale laboratory for recursive self-improvement of conditional
//! diffusion models.
//!
//! A small x0-predicting diffusion model is pretrained on an analytic
//! Gaussian-mixture world, then repeatedly fine-tuned on its own samples.
//! Each round generates a synthetic pool from a curated prompt set, keeps
//! the top-scoring samples under analytic preference scorers, down-weights
//! samples that drift away from the base model's reference distribution,
//! and fine-tunes on the weighted set. Baselines (random selection, one-shot
//! fine-tuning, strategy ablations) share the same machinery.

pub mod config;
pub mod curation;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod numkit;
pub mod prompts;
pub mod report;
pub mod rsi;
pub mod world;

pub use error::{Error, Result};
