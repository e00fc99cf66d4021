//! Round-level metrics: distribution shift (MMD), preference level,
//! hallucination rate, condition coverage, and peak detection.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curation::ScoreMix;
use crate::diffusion::{generate_batch, ConditionId, DenoiserModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numkit::{sq_dist, RealVec, RngStream};
use crate::world::{HallucinationThreshold, World};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub schema_version: u32,
    pub round: usize,
    pub mmd_to_reference: f64,
    /// Mixture of raw (unnormalised) alignment and aesthetic scores.
    pub mean_composite: f64,
    pub mean_alignment: f64,
    pub mean_aesthetic: f64,
    pub hallucination_rate: f64,
    /// Fraction of eval samples whose nearest world mode belongs to each
    /// condition.
    pub coverage: BTreeMap<ConditionId, f64>,
}

impl RoundMetrics {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Median of pairwise Euclidean distances.
pub fn median_heuristic(points: &[&[f64]]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            d.push(sq_dist(points[i], points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

fn kernel_sum(a: &[RealVec], b: &[RealVec], gamma: f64, skip_diag: bool) -> f64 {
    let rows: Vec<f64> = a
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut s = 0.0;
            for (j, y) in b.iter().enumerate() {
                if skip_diag && i == j {
                    continue;
                }
                s += (-gamma * sq_dist(x, y)).exp();
            }
            s
        })
        .collect();
    rows.iter().sum()
}

fn canonical_order<'a>(a: &'a [RealVec], b: &'a [RealVec]) -> (&'a [RealVec], &'a [RealVec]) {
    let key = |s: &[RealVec]| -> (usize, Vec<u64>) {
        (s.len(), s.iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect())
    };
    if key(a) <= key(b) {
        (a, b)
    } else {
        (b, a)
    }
}

/// Unbiased squared MMD with a Gaussian kernel `exp(-||x-y||^2 / (2 h^2))`,
/// clamped at zero. The bandwidth defaults to the median heuristic over the
/// pooled sets. Symmetric bit-for-bit in its two arguments.
pub fn mmd(a: &[RealVec], b: &[RealVec], bandwidth: Option<f64>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("mmd input set"));
    }
    let (x, y) = canonical_order(a, b);
    let h = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h}"))),
        None => {
            let pooled: Vec<&[f64]> = x.iter().chain(y).map(|p| p.as_slice()).collect();
            median_heuristic(&pooled)
        }
    };
    let gamma = 1.0 / (2.0 * h * h);
    let (m, n) = (x.len() as f64, y.len() as f64);
    let kxx = if x.len() > 1 { kernel_sum(x, x, gamma, true) / (m * (m - 1.0)) } else { 0.0 };
    let kyy = if y.len() > 1 { kernel_sum(y, y, gamma, true) / (n * (n - 1.0)) } else { 0.0 };
    let kxy = kernel_sum(x, y, gamma, false) / (m * n);
    Ok((kxx + kyy - 2.0 * kxy).max(0.0))
}

/// Biased (V-statistic) squared MMD; zero for identical multisets.
pub fn mmd_biased(a: &[RealVec], b: &[RealVec], bandwidth: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("mmd input set"));
    }
    let (x, y) = canonical_order(a, b);
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let (m, n) = (x.len() as f64, y.len() as f64);
    let v = kernel_sum(x, x, gamma, false) / (m * m) + kernel_sum(y, y, gamma, false) / (n * n)
        - 2.0 * kernel_sum(x, y, gamma, false) / (m * n);
    Ok(v.max(0.0))
}

/// Fraction of `(condition, point)` samples below their condition's
/// density cutoff.
pub fn hallucination_rate(samples: &[(ConditionId, RealVec)], world: &World, threshold: &HallucinationThreshold) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    if threshold.per_condition.len() != world.n_conditions() {
        return Err(Error::InvalidArgument(
            "hallucination threshold not calibrated for this world".into(),
        ));
    }
    let mut hits = 0usize;
    for (c, x) in samples {
        if threshold.is_hallucinated(world, x, *c)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Fixed evaluation protocol shared by every round of a run.
#[derive(Debug, Clone)]
pub struct EvalPlan {
    /// Condition of each eval sample (from held-out prompts).
    pub conditions: Vec<ConditionId>,
    /// World draws matching `conditions`, used as the shift reference.
    pub reference: Vec<RealVec>,
    pub bandwidth: f64,
    pub threshold: HallucinationThreshold,
    pub mix: ScoreMix,
    pub rng: RngStream,
}

impl EvalPlan {
    pub fn new(
        world: &World,
        conditions: Vec<ConditionId>,
        threshold: HallucinationThreshold,
        mix: ScoreMix,
        rng: &RngStream,
    ) -> Result<Self> {
        if conditions.is_empty() {
            return Err(Error::Empty("eval conditions"));
        }
        let reference = conditions
            .iter()
            .enumerate()
            .map(|(i, &c)| Ok(world.sample(c, 1, &mut rng.derive(&[0, i as u64]))?.remove(0)))
            .collect::<Result<Vec<_>>>()?;
        let pts: Vec<&[f64]> = reference.iter().map(|p| p.as_slice()).collect();
        let bandwidth = median_heuristic(&pts);
        Ok(EvalPlan {
            conditions,
            reference,
            bandwidth,
            threshold,
            mix,
            rng: rng.split(1),
        })
    }

    /// Metrics of already generated eval samples (aligned with `conditions`).
    pub fn score(&self, round: usize, samples: &[RealVec], world: &World) -> Result<RoundMetrics> {
        if samples.len() != self.conditions.len() {
            return Err(Error::DimensionMismatch {
                expected: self.conditions.len(),
                got: samples.len(),
            });
        }
        let n = samples.len() as f64;
        let mut al = 0.0;
        let mut ae = 0.0;
        let mut coverage: BTreeMap<ConditionId, f64> = (0..world.n_conditions()).map(|c| (c, 0.0)).collect();
        for (x, &c) in samples.iter().zip(&self.conditions) {
            al += world.true_alignment(x, c)?;
            ae += world.true_aesthetic(x);
            *coverage.get_mut(&world.nearest_condition(x)).unwrap() += 1.0 / n;
        }
        let pairs: Vec<(ConditionId, RealVec)> = self.conditions.iter().copied().zip(samples.iter().cloned()).collect();
        let (mean_alignment, mean_aesthetic) = (al / n, ae / n);
        Ok(RoundMetrics {
            schema_version: METRICS_SCHEMA_VERSION,
            round,
            mmd_to_reference: mmd(samples, &self.reference, Some(self.bandwidth))?,
            mean_composite: self.mix.mix(mean_alignment, mean_aesthetic),
            mean_alignment,
            mean_aesthetic,
            hallucination_rate: hallucination_rate(&pairs, world, &self.threshold)?,
            coverage,
        })
    }
}

/// Generates the eval set with `model` and scores it. The eval noise is the
/// same every round, so rounds differ only through the model.
pub fn evaluate_round(model: &DenoiserModel, round: usize, plan: &EvalPlan, world: &World, sched: &NoiseSchedule) -> Result<RoundMetrics> {
    let samples = generate_batch(model, &plan.conditions, sched, &plan.rng)?;
    plan.score(round, &samples, world)
}

/// Index of the maximum; earliest on ties.
pub fn detect_peak(trajectory: &[f64]) -> Result<usize> {
    if trajectory.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let mut best = 0;
    for (i, &v) in trajectory.iter().enumerate() {
        if v > trajectory[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldSpec;

    fn cloud(rng: &mut RngStream, n: usize, cx: f64) -> Vec<RealVec> {
        (0..n).map(|_| RealVec::new(vec![cx + rng.normal(), rng.normal()]).unwrap()).collect()
    }

    #[test]
    fn identical_sets() {
        let a = cloud(&mut RngStream::new(1), 200, 0.0);
        assert!(mmd_biased(&a, &a, 1.0).unwrap().abs() < 1e-12);
        assert_eq!(mmd(&a, &a, None).unwrap(), 0.0);
    }

    #[test]
    fn separated_clouds() {
        let mut r = RngStream::new(2);
        let a = cloud(&mut r, 300, 0.0);
        let b = cloud(&mut r, 300, 10.0);
        assert!(mmd(&a, &b, None).unwrap() > 0.5);
    }

    #[test]
    fn symmetric_and_permutation_invariant() {
        let mut r = RngStream::new(3);
        let a = cloud(&mut r, 150, 0.0);
        let b = cloud(&mut r, 120, 0.7);
        let ab = mmd(&a, &b, None).unwrap();
        assert_eq!(ab.to_bits(), mmd(&b, &a, None).unwrap().to_bits());
        let mut a2 = a.clone();
        r.shuffle(&mut a2);
        let mut b2 = b.clone();
        r.shuffle(&mut b2);
        assert!((mmd(&a2, &b2, Some(1.3)).unwrap() - mmd(&a, &b, Some(1.3)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn empty_rejected() {
        assert!(mmd(&[], &[RealVec::zeros(1)], None).is_err());
    }

    #[test]
    fn mmd_matches_pairwise_oracle() {
        let mut r = RngStream::new(8);
        let a = cloud(&mut r, 12, 0.0);
        let b = cloud(&mut r, 9, 0.5);
        let h: f64 = 0.9;
        let k = |x: &RealVec, y: &RealVec| (-((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)) / (2.0 * h * h)).exp();
        let mut sxx = 0.0;
        for i in 0..12 {
            for j in 0..12 {
                if i != j {
                    sxx += k(&a[i], &a[j]);
                }
            }
        }
        let mut syy = 0.0;
        for i in 0..9 {
            for j in 0..9 {
                if i != j {
                    syy += k(&b[i], &b[j]);
                }
            }
        }
        let mut sxy = 0.0;
        for x in &a {
            for y in &b {
                sxy += k(x, y);
            }
        }
        let want = (sxx / 132.0 + syy / 72.0 - 2.0 * sxy / 108.0).max(0.0);
        assert!((mmd(&a, &b, Some(h)).unwrap() - want).abs() < 1e-12);
    }

    fn world() -> World {
        World::new(WorldSpec::rings8()).unwrap()
    }

    #[test]
    fn hallucination_rate_calibrates_to_quantile() {
        let w = world();
        let th = HallucinationThreshold::calibrate(&w, 0.05, 20_000, &RngStream::new(1)).unwrap();
        let mut r = RngStream::new(99);
        let samples: Vec<(usize, RealVec)> = (0..10_000)
            .map(|i| {
                let c = i % 8;
                (c, w.sample(c, 1, &mut r).unwrap().remove(0))
            })
            .collect();
        let rate = hallucination_rate(&samples, &w, &th).unwrap();
        assert!((rate - 0.05).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn hallucination_extremes() {
        let w = world();
        let th = HallucinationThreshold::calibrate(&w, 0.001, 5_000, &RngStream::new(1)).unwrap();
        let at_modes: Vec<(usize, RealVec)> = (0..8).map(|c| (c, w.mode(c).unwrap().clone())).collect();
        assert_eq!(hallucination_rate(&at_modes, &w, &th).unwrap(), 0.0);
        let far: Vec<(usize, RealVec)> = (0..8).map(|c| (c, RealVec::new(vec![100.0, 0.0]).unwrap())).collect();
        assert_eq!(hallucination_rate(&far, &w, &th).unwrap(), 1.0);
    }

    #[test]
    fn hallucination_monotone_in_quantile() {
        let w = world();
        let mut r = RngStream::new(4);
        let samples: Vec<(usize, RealVec)> = (0..2000)
            .map(|i| (i % 8, RealVec::new(vec![r.normal() * 1.5, r.normal() * 1.5]).unwrap()))
            .collect();
        let mut prev = 0.0;
        for q in [0.001, 0.01, 0.05, 0.2, 0.5] {
            let th = HallucinationThreshold::calibrate(&w, q, 4000, &RngStream::new(2)).unwrap();
            let rate = hallucination_rate(&samples, &w, &th).unwrap();
            assert!(rate >= prev);
            prev = rate;
        }
    }

    #[test]
    fn uncalibrated_threshold_rejected() {
        let w = world();
        let th = HallucinationThreshold { quantile: 0.1, per_condition: vec![] };
        assert!(hallucination_rate(&[(0, RealVec::zeros(2))], &w, &th).is_err());
    }

    #[test]
    fn world_matched_sampler_sits_at_noise_floor() {
        let w = world();
        let conds: Vec<usize> = (0..800).map(|i| i % 8).collect();
        let th = HallucinationThreshold::calibrate(&w, 0.001, 2000, &RngStream::new(1)).unwrap();
        let plan = EvalPlan::new(&w, conds.clone(), th, ScoreMix::default(), &RngStream::new(5)).unwrap();
        let draw = |seed: u64| -> Vec<RealVec> {
            conds
                .iter()
                .enumerate()
                .map(|(i, &c)| w.sample(c, 1, &mut RngStream::new(seed).split(i as u64)).unwrap().remove(0))
                .collect()
        };
        // Noise floor: two independent world draws against each other.
        let floor = mmd(&draw(100), &draw(200), Some(plan.bandwidth)).unwrap();
        let m = plan.score(0, &draw(300), &w).unwrap();
        assert!(m.mmd_to_reference <= 5.0 * floor.max(1e-4), "{} vs floor {floor}", m.mmd_to_reference);
        let total: f64 = m.coverage.values().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&m.hallucination_rate));
    }

    #[test]
    fn metrics_json_round_trip() {
        let mut coverage = BTreeMap::new();
        coverage.insert(0, 0.25);
        coverage.insert(1, 0.75);
        let m = RoundMetrics {
            schema_version: METRICS_SCHEMA_VERSION,
            round: 3,
            mmd_to_reference: 0.0123456789,
            mean_composite: 0.61,
            mean_alignment: 0.5,
            mean_aesthetic: 0.72,
            hallucination_rate: 0.004,
            coverage,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.json");
        m.write(&p).unwrap();
        assert_eq!(RoundMetrics::read(&p).unwrap(), m);
    }

    #[test]
    fn peak_rules() {
        assert_eq!(detect_peak(&[1.0, 3.0, 2.0]).unwrap(), 1);
        assert_eq!(detect_peak(&[1.0, 2.0, 3.0]).unwrap(), 2);
        assert_eq!(detect_peak(&[4.0, 4.0, 4.0]).unwrap(), 0);
        assert!(detect_peak(&[]).is_err());
    }
}
