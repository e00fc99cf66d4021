use serde::{Deserialize, Serialize};

use super::{diffusion_loss, DenoiserModel, NoiseSchedule, TrainExample};
use crate::error::{Error, Result};
use crate::numkit::{AdamConfig, OptState, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Minibatch Adam on the weighted reconstruction loss.
///
/// Per epoch `e` the visiting order comes from `rng.derive([0, e])` and the
/// per-example `(t, eps)` draws from `rng.derive([1, e]).split(example.id)`,
/// so the trajectory depends only on the seed and the example ids. Zero
/// epochs returns the model unchanged.
pub fn train(
    model: &DenoiserModel,
    examples: &[TrainExample],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<(DenoiserModel, TrainReport)> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if sched.steps() != model.config.horizon {
        return Err(Error::InvalidArgument(format!(
            "schedule has {} steps but model was built for {}",
            sched.steps(),
            model.config.horizon
        )));
    }
    let mut model = model.clone();
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok((model, report));
    }
    if examples.is_empty() {
        return Err(Error::Empty("training examples"));
    }
    let mut mlp_state = OptState::for_params(&model.mlp, cfg.adam);
    let mut emb_state = OptState::new(model.embeddings.len(), cfg.adam);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs as u64 {
        order.sort_unstable();
        rng.derive(&[0, epoch]).shuffle(&mut order);
        let draw_rng = rng.derive(&[1, epoch]);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i].clone()));
            let (loss, grads) = diffusion_loss(&model, &batch, sched, &draw_rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            epoch_loss += loss * chunk.len() as f64;
            mlp_state.update(model.mlp.data_mut(), grads.mlp.data())?;
            emb_state.update(&mut model.embeddings, &grads.embeddings)?;
            report.steps += 1;
        }
        report.epoch_losses.push(epoch_loss / examples.len() as f64);
    }
    if !model.is_finite() {
        return Err(Error::NonFinite("model parameters"));
    }
    Ok((model, report))
}
