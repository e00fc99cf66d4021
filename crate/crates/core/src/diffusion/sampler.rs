use rayon::prelude::*;

use super::{ConditionId, DenoiserModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numkit::{RealVec, RngStream};

/// Samples processed together per worker task.
const CHUNK: usize = 256;

/// Ancestral sampling for a list of conditions, one output per entry.
///
/// Output `j` draws all of its noise from `rng.split(j)`, so results do not
/// depend on chunking or worker count.
pub fn generate_batch(
    model: &DenoiserModel,
    conds: &[ConditionId],
    sched: &NoiseSchedule,
    rng: &RngStream,
) -> Result<Vec<RealVec>> {
    if sched.steps() != model.config.horizon {
        return Err(Error::InvalidArgument(format!(
            "schedule has {} steps but model was built for {}",
            sched.steps(),
            model.config.horizon
        )));
    }
    if let Some(&bad) = conds.iter().find(|&&c| c >= model.config.n_conditions) {
        return Err(Error::UnknownCondition(bad));
    }
    let chunks: Vec<Result<Vec<RealVec>>> = conds
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| sample_chunk(model, chunk, ci * CHUNK, sched, rng))
        .collect();
    let mut out = Vec::with_capacity(conds.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn sample_chunk(
    model: &DenoiserModel,
    conds: &[ConditionId],
    first: usize,
    sched: &NoiseSchedule,
    rng: &RngStream,
) -> Result<Vec<RealVec>> {
    let d = model.config.data_dim;
    let n = conds.len();
    let mut streams: Vec<RngStream> = (0..n).map(|j| rng.split((first + j) as u64)).collect();
    let mut x: Vec<f64> = Vec::with_capacity(n * d);
    for s in &mut streams {
        x.extend(s.normals(d));
    }
    let mut ts = vec![0usize; n];
    for t in (1..=sched.steps()).rev() {
        ts.fill(t);
        let x0_hat = model.predict_batch(&x, &ts, conds)?;
        let (cx0, cxt) = sched.posterior_mean_coefs(t);
        let sd = if t > 1 { sched.posterior_variance(t).sqrt() } else { 0.0 };
        for (j, s) in streams.iter_mut().enumerate() {
            for k in 0..d {
                let i = j * d + k;
                let mut v = cx0 * x0_hat[i] + cxt * x[i];
                if t > 1 {
                    v += sd * s.normal();
                }
                x[i] = v;
            }
        }
    }
    x.chunks(d).map(|p| RealVec::new(p.to_vec())).collect()
}

/// `n` samples for a single condition.
pub fn generate(
    model: &DenoiserModel,
    c: ConditionId,
    n: usize,
    sched: &NoiseSchedule,
    rng: &RngStream,
) -> Result<Vec<RealVec>> {
    if n == 0 {
        return Err(Error::InvalidArgument("generate needs n >= 1".into()));
    }
    generate_batch(model, &vec![c; n], sched, rng)
}
