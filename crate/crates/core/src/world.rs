//! Analytic ground-truth world: a condition-indexed Gaussian mixture that
//! stands in for real data, and closed-form preference fields that stand in
//! for learned scorers.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diffusion::ConditionId;
use crate::error::{Error, Result};
use crate::numkit::{RealVec, RngStream};

/// Name of the built-in world.
pub const RINGS_8: &str = "rings-8";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub mean: RealVec,
    /// Diagonal covariance.
    pub var: RealVec,
    pub weight: f64,
}

/// A condition as seen by the prompt pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub id: ConditionId,
    pub label: String,
    pub embedding: RealVec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldCondition {
    pub id: ConditionId,
    pub label: String,
    pub embedding: RealVec,
    pub components: Vec<Component>,
}

impl WorldCondition {
    pub fn condition(&self) -> Condition {
        Condition {
            id: self.id,
            label: self.label.clone(),
            embedding: self.embedding.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceField {
    pub direction: RealVec,
    pub sharpness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub name: String,
    pub dim: usize,
    pub conditions: Vec<WorldCondition>,
    pub preference: PreferenceField,
    /// Alignment is `(density / mode density) ^ alignment_exponent`.
    pub alignment_exponent: f64,
}

impl WorldSpec {
    /// 8 conditions with two components each, on concentric rings of radius
    /// 1 and 2 (outer ring rotated by half a sector), variance 0.05.
    pub fn rings8() -> Self {
        let n = 8;
        let conditions = (0..n)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / n as f64;
                let b = a + PI / n as f64;
                let comp = |r: f64, ang: f64, w: f64| Component {
                    mean: RealVec::new(vec![r * ang.cos(), r * ang.sin()]).unwrap(),
                    var: RealVec::new(vec![0.05, 0.05]).unwrap(),
                    weight: w,
                };
                let mut emb = vec![0.0; n];
                emb[k] = 2.0;
                WorldCondition {
                    id: k,
                    label: format!("concept-{k}"),
                    embedding: RealVec::new(emb).unwrap(),
                    components: vec![comp(1.0, a, 0.6), comp(2.0, b, 0.4)],
                }
            })
            .collect();
        WorldSpec {
            name: RINGS_8.to_string(),
            dim: 2,
            conditions,
            preference: PreferenceField {
                direction: RealVec::new(vec![1.0, 0.0]).unwrap(),
                sharpness: 1.5,
            },
            alignment_exponent: 0.25,
        }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            RINGS_8 => Ok(Self::rings8()),
            other => Err(Error::Config(format!("unknown built-in world '{other}'"))),
        }
    }
}

/// Validated world with cached per-condition mode densities.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    spec: WorldSpec,
    mode_density: Vec<f64>,
    modes: Vec<RealVec>,
    direction: Vec<f64>,
}

fn gaussian_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut log = 0.0;
    for ((xi, mi), vi) in x.iter().zip(mean).zip(var) {
        let r = xi - mi;
        log += -0.5 * r * r / vi - 0.5 * (2.0 * PI * vi).ln();
    }
    log.exp()
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        if spec.conditions.is_empty() {
            return Err(Error::Config("world has no conditions".into()));
        }
        for (i, c) in spec.conditions.iter().enumerate() {
            if c.id != i {
                return Err(Error::Config(format!(
                    "condition ids must be 0..n in order; position {i} has id {}",
                    c.id
                )));
            }
            if c.components.is_empty() {
                return Err(Error::Config(format!("condition {i} has no components")));
            }
            let wsum: f64 = c.components.iter().map(|k| k.weight).sum();
            if (wsum - 1.0).abs() > 1e-9 || c.components.iter().any(|k| !(k.weight >= 0.0)) {
                return Err(Error::Config(format!("condition {i} mixing weights must be >= 0 and sum to 1")));
            }
            for k in &c.components {
                if k.mean.dim() != spec.dim || k.var.dim() != spec.dim {
                    return Err(Error::Config(format!("condition {i} component dimension mismatch")));
                }
                if k.var.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::Config(format!("condition {i} has nonpositive variance")));
                }
            }
        }
        if spec.preference.direction.dim() != spec.dim || spec.preference.direction.norm() == 0.0 {
            return Err(Error::Config("preference direction must be nonzero with world dimension".into()));
        }
        if !(spec.alignment_exponent > 0.0) {
            return Err(Error::Config("alignment_exponent must be positive".into()));
        }
        let norm = spec.preference.direction.norm();
        let direction = spec.preference.direction.iter().map(|v| v / norm).collect();
        let mut world = World {
            spec,
            mode_density: Vec::new(),
            modes: Vec::new(),
            direction,
        };
        for c in 0..world.n_conditions() {
            let (mode, dens) = world.find_mode(c);
            world.modes.push(mode);
            world.mode_density.push(dens);
        }
        Ok(world)
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn n_conditions(&self) -> usize {
        self.spec.conditions.len()
    }

    pub fn conditions(&self) -> Vec<Condition> {
        self.spec.conditions.iter().map(|c| c.condition()).collect()
    }

    fn cond(&self, c: ConditionId) -> Result<&WorldCondition> {
        self.spec.conditions.get(c).ok_or(Error::UnknownCondition(c))
    }

    /// Highest-density mode of condition `c`.
    pub fn mode(&self, c: ConditionId) -> Result<&RealVec> {
        self.cond(c)?;
        Ok(&self.modes[c])
    }

    /// Mixture density of `x` under condition `c`.
    pub fn density(&self, x: &[f64], c: ConditionId) -> Result<f64> {
        let cond = self.cond(c)?;
        if x.len() != self.spec.dim {
            return Err(Error::DimensionMismatch { expected: self.spec.dim, got: x.len() });
        }
        Ok(cond
            .components
            .iter()
            .map(|k| k.weight * gaussian_diag(x, &k.mean, &k.var))
            .sum())
    }

    /// Fixed-point mode search started from every component mean.
    fn find_mode(&self, c: ConditionId) -> (RealVec, f64) {
        let cond = &self.spec.conditions[c];
        let d = self.spec.dim;
        let mut best = (cond.components[0].mean.clone(), f64::NEG_INFINITY);
        for start in &cond.components {
            let mut x = start.mean.to_vec();
            for _ in 0..200 {
                let mut num = vec![0.0; d];
                let mut den = vec![0.0; d];
                for k in &cond.components {
                    let r = k.weight * gaussian_diag(&x, &k.mean, &k.var);
                    for i in 0..d {
                        num[i] += r * k.mean[i] / k.var[i];
                        den[i] += r / k.var[i];
                    }
                }
                let next: Vec<f64> = (0..d)
                    .map(|i| if den[i] > 0.0 { num[i] / den[i] } else { x[i] })
                    .collect();
                let moved = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                x = next;
                if moved < 1e-15 {
                    break;
                }
            }
            let dens = self.density(&x, c).unwrap();
            if dens > best.1 {
                best = (RealVec::new(x).unwrap(), dens);
            }
        }
        best
    }

    /// Prompt alignment proxy in `[0, 1]`: mode-normalised density under the
    /// condition, squashed by a fixed power.
    pub fn true_alignment(&self, x: &[f64], c: ConditionId) -> Result<f64> {
        let rel = self.density(x, c)? / self.mode_density[c];
        Ok(rel.powf(self.spec.alignment_exponent).clamp(0.0, 1.0))
    }

    /// Condition-independent aesthetic proxy: logistic of the projection on
    /// the preferred direction.
    pub fn true_aesthetic(&self, x: &[f64]) -> f64 {
        let proj: f64 = x.iter().zip(&self.direction).map(|(a, b)| a * b).sum();
        1.0 / (1.0 + (-self.spec.preference.sharpness * proj).exp())
    }

    pub fn sample(&self, c: ConditionId, n: usize, rng: &mut RngStream) -> Result<Vec<RealVec>> {
        let cond = self.cond(c)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut pick = &cond.components[cond.components.len() - 1];
            for k in &cond.components {
                acc += k.weight;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            let x: Vec<f64> = (0..self.spec.dim)
                .map(|i| pick.mean[i] + pick.var[i].sqrt() * rng.normal())
                .collect();
            out.push(RealVec::new(x)?);
        }
        Ok(out)
    }

    /// The condition owning the component mean nearest to `x`.
    pub fn nearest_condition(&self, x: &[f64]) -> ConditionId {
        let mut best = (0, f64::INFINITY);
        for c in &self.spec.conditions {
            for k in &c.components {
                let d = crate::numkit::sq_dist(x, &k.mean);
                if d < best.1 {
                    best = (c.id, d);
                }
            }
        }
        best.0
    }
}

/// Per-condition density cutoffs below which a sample counts as
/// hallucinated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationThreshold {
    pub quantile: f64,
    pub per_condition: Vec<f64>,
}

impl HallucinationThreshold {
    /// Empirical `quantile` of own-condition densities of world draws.
    pub fn calibrate(world: &World, quantile: f64, draws_per_condition: usize, rng: &RngStream) -> Result<Self> {
        if !(0.0..1.0).contains(&quantile) {
            return Err(Error::InvalidArgument(format!("quantile {quantile} outside [0, 1)")));
        }
        if draws_per_condition == 0 {
            return Err(Error::InvalidArgument("need at least one calibration draw".into()));
        }
        let mut per_condition = Vec::with_capacity(world.n_conditions());
        for c in 0..world.n_conditions() {
            let mut r = rng.split(c as u64);
            let mut dens: Vec<f64> = world
                .sample(c, draws_per_condition, &mut r)?
                .iter()
                .map(|x| world.density(x, c))
                .collect::<Result<_>>()?;
            dens.sort_by(f64::total_cmp);
            let idx = ((quantile * draws_per_condition as f64).floor() as usize).min(draws_per_condition - 1);
            per_condition.push(dens[idx]);
        }
        Ok(HallucinationThreshold { quantile, per_condition })
    }

    pub fn is_hallucinated(&self, world: &World, x: &[f64], c: ConditionId) -> Result<bool> {
        let cut = *self.per_condition.get(c).ok_or(Error::UnknownCondition(c))?;
        Ok(world.density(x, c)? < cut)
    }
}
