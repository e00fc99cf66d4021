use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ConditionId;
use crate::error::{Error, Result};
use crate::numkit::{Activation, ForwardCache, MlpParams, RealVec, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub n_conditions: usize,
    pub embed_dim: usize,
    /// Number of sinusoidal (sin, cos) pairs appended to `t/T`.
    pub time_pairs: usize,
    pub hidden: Vec<usize>,
    /// Number of diffusion steps the model is trained for.
    pub horizon: usize,
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        self.data_dim + 1 + 2 * self.time_pairs + self.embed_dim
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(&self.hidden);
        sizes.push(self.data_dim);
        sizes
    }
}

/// `[t/T, sin(2^k pi t/T), cos(2^k pi t/T) for k < pairs]`.
pub fn time_features(t: usize, horizon: usize, pairs: usize) -> Vec<f64> {
    let s = t as f64 / horizon as f64;
    let mut f = Vec::with_capacity(1 + 2 * pairs);
    f.push(s);
    for k in 0..pairs {
        let w = (1u64 << k) as f64 * PI * s;
        f.push(w.sin());
        f.push(w.cos());
    }
    f
}

/// Conditional x0 predictor: perceptron plus a learned embedding table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserModel {
    pub config: ModelConfig,
    pub mlp: MlpParams,
    /// Row-major `n_conditions x embed_dim`.
    pub embeddings: Vec<f64>,
}

/// Gradients matching a [`DenoiserModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub mlp: MlpParams,
    pub embeddings: Vec<f64>,
}

impl DenoiserModel {
    pub fn new(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        validate(&config)?;
        let mlp = MlpParams::init(&config.layer_sizes(), Activation::Tanh, &mut rng.split(0))?;
        let mut er = rng.split(1);
        let embeddings = er.normals(config.n_conditions * config.embed_dim);
        Ok(DenoiserModel {
            config,
            mlp,
            embeddings,
        })
    }

    /// All-zero parameters; predicts the origin everywhere.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        validate(&config)?;
        let mlp = MlpParams::zeros(&config.layer_sizes(), Activation::Tanh)?;
        let embeddings = vec![0.0; config.n_conditions * config.embed_dim];
        Ok(DenoiserModel {
            config,
            mlp,
            embeddings,
        })
    }

    pub fn embedding(&self, c: ConditionId) -> Result<&[f64]> {
        if c >= self.config.n_conditions {
            return Err(Error::UnknownCondition(c));
        }
        let e = self.config.embed_dim;
        Ok(&self.embeddings[c * e..(c + 1) * e])
    }

    pub fn is_finite(&self) -> bool {
        self.mlp.is_finite() && self.embeddings.iter().all(|v| v.is_finite())
    }

    /// Assembles the row-major network input for a batch.
    pub(crate) fn build_inputs(&self, xs: &[f64], ts: &[usize], conds: &[ConditionId]) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let d = cfg.data_dim;
        let n = conds.len();
        if xs.len() != n * d || ts.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n * d,
                got: xs.len(),
            });
        }
        let mut inputs = Vec::with_capacity(n * cfg.input_dim());
        let mut cached_t = usize::MAX;
        let mut tf = Vec::new();
        for i in 0..n {
            if ts[i] != cached_t {
                tf = time_features(ts[i], cfg.horizon, cfg.time_pairs);
                cached_t = ts[i];
            }
            inputs.extend_from_slice(&xs[i * d..(i + 1) * d]);
            inputs.extend_from_slice(&tf);
            inputs.extend_from_slice(self.embedding(conds[i])?);
        }
        Ok(inputs)
    }

    /// Batched x0 prediction; `xs` is row-major `n x data_dim`.
    pub fn predict_batch(&self, xs: &[f64], ts: &[usize], conds: &[ConditionId]) -> Result<Vec<f64>> {
        let inputs = self.build_inputs(xs, ts, conds)?;
        self.mlp.forward_batch(&inputs, conds.len())
    }

    pub(crate) fn forward_cached(&self, xs: &[f64], ts: &[usize], conds: &[ConditionId]) -> Result<ForwardCache> {
        let inputs = self.build_inputs(xs, ts, conds)?;
        self.mlp.forward_cached(&inputs, conds.len())
    }

    /// Backpropagates dLoss/dPrediction into perceptron and embedding grads.
    pub(crate) fn backward(&self, cache: &ForwardCache, conds: &[ConditionId], d_out: &[f64]) -> Result<ModelGrads> {
        let (mlp, d_in) = self.mlp.backward(cache, d_out)?;
        let cfg = &self.config;
        let (e, width) = (cfg.embed_dim, cfg.input_dim());
        let off = width - e;
        let mut embeddings = vec![0.0; self.embeddings.len()];
        for (i, &c) in conds.iter().enumerate() {
            let src = &d_in[i * width + off..(i + 1) * width];
            for (g, s) in embeddings[c * e..(c + 1) * e].iter_mut().zip(src) {
                *g += s;
            }
        }
        Ok(ModelGrads { mlp, embeddings })
    }

    /// x̂0(x_t, t, c) for a single point.
    pub fn predict_x0(&self, x_t: &RealVec, t: usize, c: ConditionId) -> Result<RealVec> {
        if x_t.dim() != self.config.data_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.data_dim,
                got: x_t.dim(),
            });
        }
        if t == 0 || t > self.config.horizon {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.config.horizon,
            });
        }
        RealVec::new(self.predict_batch(x_t, &[t], &[c])?)
    }
}

fn validate(cfg: &ModelConfig) -> Result<()> {
    if cfg.data_dim == 0 || cfg.n_conditions == 0 || cfg.horizon == 0 {
        return Err(Error::InvalidArgument(
            "model needs positive data_dim, n_conditions and horizon".into(),
        ));
    }
    Ok(())
}
