use serde::{Deserialize, Serialize};

use super::{RealVec, RngStream};
use crate::error::{Error, Result};

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Parameters of a fully connected perceptron, stored flat.
///
/// For every layer the row-major `out x in` weight block is followed by the
/// `out` biases. The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    sizes: Vec<usize>,
    activation: Activation,
    data: Vec<f64>,
}

/// Per-layer outputs kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache holds at least the input")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl MlpParams {
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must have at least two positive entries, got {sizes:?}"
            )));
        }
        Ok(MlpParams {
            sizes: sizes.to_vec(),
            activation,
            data: vec![0.0; param_count(sizes)],
        })
    }

    /// Scaled uniform init: each weight in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(sizes: &[usize], activation: Activation, rng: &mut RngStream) -> Result<Self> {
        let mut p = Self::zeros(sizes, activation)?;
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p.data[offset..offset + fan_in * fan_out] {
                *v = rng.uniform_range(-bound, bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(p)
    }

    /// A single linear layer computing the identity map on `dim` inputs.
    pub fn identity(dim: usize) -> Result<Self> {
        let mut p = Self::zeros(&[dim, dim], Activation::Tanh)?;
        for i in 0..dim {
            p.data[i * dim + i] = 1.0;
        }
        Ok(p)
    }

    /// Builds from explicit flat data, validating length and finiteness.
    pub fn from_flat(sizes: &[usize], activation: Activation, data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(sizes, activation)?;
        if data.len() != p.data.len() {
            return Err(Error::DimensionMismatch {
                expected: p.data.len(),
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("MlpParams"));
        }
        p.data = data;
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            sizes: self.sizes.clone(),
            activation: self.activation,
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.sizes == other.sizes && self.data.len() == other.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.sizes[..=layer])
    }

    /// `(weights, biases)` of one layer.
    pub fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let off = self.layer_offset(layer);
        let (w, rest) = self.data[off..].split_at(n_in * n_out);
        (w, &rest[..n_out])
    }

    fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let (n_in, n_out) = (self.sizes[layer], self.sizes[layer + 1]);
        let off = self.layer_offset(layer);
        let (w, rest) = self.data[off..].split_at_mut(n_in * n_out);
        (w, &mut rest[..n_out])
    }

    /// Forward pass over a row-major batch, keeping every layer's output.
    pub fn forward_cached(&self, inputs: &[f64], batch: usize) -> Result<ForwardCache> {
        let n_in = self.input_dim();
        if inputs.len() != batch * n_in {
            return Err(Error::DimensionMismatch {
                expected: batch * n_in,
                got: inputs.len(),
            });
        }
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(inputs.to_vec());
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let (li, lo) = (self.sizes[l], self.sizes[l + 1]);
            let prev = &acts[l];
            let mut out = vec![0.0; batch * lo];
            for s in 0..batch {
                let x = &prev[s * li..(s + 1) * li];
                let y = &mut out[s * lo..(s + 1) * lo];
                for (o, yo) in y.iter_mut().enumerate() {
                    let row = &w[o * li..(o + 1) * li];
                    let mut acc = b[o];
                    for (wi, xi) in row.iter().zip(x) {
                        acc += wi * xi;
                    }
                    *yo = if l == last { acc } else { self.activation.apply(acc) };
                }
            }
            acts.push(out);
        }
        Ok(ForwardCache { batch, acts })
    }

    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        let mut cache = self.forward_cached(inputs, batch)?;
        Ok(cache.acts.pop().unwrap())
    }

    /// Reverse pass. `d_out` is dLoss/dOutput (row-major, same batch as the
    /// cache). Returns parameter gradients and dLoss/dInput.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64]) -> Result<(MlpParams, Vec<f64>)> {
        let batch = cache.batch;
        if d_out.len() != batch * self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: batch * self.output_dim(),
                got: d_out.len(),
            });
        }
        let mut grads = self.zeros_like();
        let mut delta = d_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (li, lo) = (self.sizes[l], self.sizes[l + 1]);
            let prev = &cache.acts[l];
            {
                let (gw, gb) = grads.layer_mut(l);
                for s in 0..batch {
                    let d = &delta[s * lo..(s + 1) * lo];
                    let x = &prev[s * li..(s + 1) * li];
                    for (o, &dso) in d.iter().enumerate() {
                        if dso == 0.0 {
                            continue;
                        }
                        gb[o] += dso;
                        for (g, xi) in gw[o * li..(o + 1) * li].iter_mut().zip(x) {
                            *g += dso * xi;
                        }
                    }
                }
            }
            let (w, _) = self.layer(l);
            let mut d_prev = vec![0.0; batch * li];
            for s in 0..batch {
                let d = &delta[s * lo..(s + 1) * lo];
                let dp = &mut d_prev[s * li..(s + 1) * li];
                for (o, &dso) in d.iter().enumerate() {
                    if dso == 0.0 {
                        continue;
                    }
                    for (p, wi) in dp.iter_mut().zip(&w[o * li..(o + 1) * li]) {
                        *p += dso * wi;
                    }
                }
            }
            if l > 0 {
                for (p, a) in d_prev.iter_mut().zip(prev) {
                    *p *= self.activation.grad_from_output(*a);
                }
            }
            delta = d_prev;
        }
        Ok((grads, delta))
    }
}

/// Evaluates the perceptron on one input vector.
pub fn mlp_forward(params: &MlpParams, input: &RealVec) -> Result<RealVec> {
    if input.dim() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            got: input.dim(),
        });
    }
    RealVec::new(params.forward_batch(input, 1)?)
}

/// Weighted mean squared error `(1/N) sum_i w_i ||f(x_i) - y_i||^2` and its
/// exact gradient with respect to the parameters.
pub fn loss_and_grad(
    params: &MlpParams,
    inputs: &[RealVec],
    targets: &[RealVec],
    weights: &[f64],
) -> Result<(f64, MlpParams)> {
    let n = inputs.len();
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    if targets.len() != n || weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: targets.len().min(weights.len()),
        });
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
    }
    let (n_in, n_out) = (params.input_dim(), params.output_dim());
    let mut flat = Vec::with_capacity(n * n_in);
    for x in inputs {
        if x.dim() != n_in {
            return Err(Error::DimensionMismatch { expected: n_in, got: x.dim() });
        }
        flat.extend_from_slice(x);
    }
    let cache = params.forward_cached(&flat, n)?;
    let out = cache.output();
    let mut loss = 0.0;
    let mut d_out = vec![0.0; n * n_out];
    let scale = 1.0 / n as f64;
    for (s, (t, &w)) in targets.iter().zip(weights).enumerate() {
        if t.dim() != n_out {
            return Err(Error::DimensionMismatch { expected: n_out, got: t.dim() });
        }
        for k in 0..n_out {
            let r = out[s * n_out + k] - t[k];
            loss += w * r * r * scale;
            d_out[s * n_out + k] = 2.0 * w * r * scale;
        }
    }
    let (grads, _) = params.backward(&cache, &d_out)?;
    Ok((loss, grads))
}
