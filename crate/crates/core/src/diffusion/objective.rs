use serde::{Deserialize, Serialize};

use super::{ConditionId, DenoiserModel, ModelGrads, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numkit::{RealVec, RngStream};

/// One weighted training point. `id` keys the example's random substream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub id: u64,
    pub x0: RealVec,
    pub condition: ConditionId,
    pub weight: f64,
}

/// `sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps`.
pub fn noise_with(x0: &[f64], alpha_bar: f64, eps: &[f64]) -> Vec<f64> {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect()
}

/// Closed-form forward noising to step `t`. Returns `(x_t, eps)`.
pub fn forward_noise(
    x0: &RealVec,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
) -> Result<(RealVec, RealVec)> {
    sched.check(t)?;
    let eps = rng.normals(x0.dim());
    let xt = noise_with(x0, sched.alpha_bar(t), &eps);
    Ok((RealVec::new(xt)?, RealVec::new(eps)?))
}

/// Draws `(t, x_t)` for one example from its own substream.
fn draw(ex: &TrainExample, sched: &NoiseSchedule, rng: &RngStream) -> Result<(usize, RealVec)> {
    let mut r = rng.split(ex.id);
    let t = 1 + r.below(sched.steps());
    let (xt, _) = forward_noise(&ex.x0, t, sched, &mut r)?;
    Ok((t, xt))
}

fn check_examples(model: &DenoiserModel, examples: &[TrainExample], sched: &NoiseSchedule) -> Result<()> {
    if sched.steps() != model.config.horizon {
        return Err(Error::InvalidArgument(format!(
            "schedule has {} steps but model was built for {}",
            sched.steps(),
            model.config.horizon
        )));
    }
    if examples.is_empty() {
        return Err(Error::Empty("training examples"));
    }
    for ex in examples {
        if !(ex.weight >= 0.0) || !ex.weight.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "example {} has invalid weight {}",
                ex.id, ex.weight
            )));
        }
        if ex.x0.dim() != model.config.data_dim {
            return Err(Error::DimensionMismatch {
                expected: model.config.data_dim,
                got: ex.x0.dim(),
            });
        }
        if ex.condition >= model.config.n_conditions {
            return Err(Error::UnknownCondition(ex.condition));
        }
    }
    Ok(())
}

/// Weighted x0 reconstruction loss `(1/N) sum w ||x̂0(x_t, t, c) - x0||^2`
/// with gradients for the whole model.
pub fn diffusion_loss(
    model: &DenoiserModel,
    examples: &[TrainExample],
    sched: &NoiseSchedule,
    rng: &RngStream,
) -> Result<(f64, ModelGrads)> {
    check_examples(model, examples, sched)?;
    let d = model.config.data_dim;
    let n = examples.len();
    let mut xs = Vec::with_capacity(n * d);
    let mut ts = Vec::with_capacity(n);
    let mut conds = Vec::with_capacity(n);
    for ex in examples {
        let (t, xt) = draw(ex, sched, rng)?;
        xs.extend_from_slice(&xt);
        ts.push(t);
        conds.push(ex.condition);
    }
    let cache = model.forward_cached(&xs, &ts, &conds)?;
    let pred = cache.output();
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_out = vec![0.0; n * d];
    for (i, ex) in examples.iter().enumerate() {
        for k in 0..d {
            let r = pred[i * d + k] - ex.x0[k];
            loss += ex.weight * r * r * scale;
            d_out[i * d + k] = 2.0 * ex.weight * r * scale;
        }
    }
    let grads = model.backward(&cache, &conds, &d_out)?;
    Ok((loss, grads))
}

/// Plain mean reconstruction loss on the same per-example draws as
/// [`diffusion_loss`], evaluated one example at a time; weights ignored.
pub fn unweighted_loss(
    model: &DenoiserModel,
    examples: &[TrainExample],
    sched: &NoiseSchedule,
    rng: &RngStream,
) -> Result<f64> {
    check_examples(model, examples, sched)?;
    let mut total = 0.0;
    for ex in examples {
        let (t, xt) = draw(ex, sched, rng)?;
        let pred = model.predict_x0(&xt, t, ex.condition)?;
        total += pred.iter().zip(ex.x0.iter()).map(|(p, x)| (p - x) * (p - x)).sum::<f64>();
    }
    Ok(total / examples.len() as f64)
}
