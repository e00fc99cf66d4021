//! Preference sampling over a synthetic pool and distribution-based sample
//! weighting against the base model's reference set.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::ConditionId;
use crate::error::{Error, Result};
use crate::numkit::{RealVec, RngStream};
use crate::world::World;

/// One generated data point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub round: usize,
    pub prompt_id: u64,
    pub condition: ConditionId,
    pub x: RealVec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub alignment: f64,
    pub aesthetic: f64,
    pub composite: f64,
}

/// Nonnegative mixture weights over the two scorers; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreMix {
    pub alignment: f64,
    pub aesthetic: f64,
}

impl Default for ScoreMix {
    fn default() -> Self {
        ScoreMix {
            alignment: 0.65,
            aesthetic: 0.35,
        }
    }
}

impl ScoreMix {
    pub fn validate(&self) -> Result<()> {
        if !(self.alignment >= 0.0 && self.aesthetic >= 0.0) || (self.alignment + self.aesthetic - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "score mixture must be nonnegative and sum to 1, got ({}, {})",
                self.alignment, self.aesthetic
            )));
        }
        Ok(())
    }

    pub fn mix(&self, alignment: f64, aesthetic: f64) -> f64 {
        self.alignment * alignment + self.aesthetic * aesthetic
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMode {
    /// Mean Euclidean distance to every reference point.
    #[default]
    MeanToReference,
    /// Distance to the closest reference point.
    NearestInReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub k_select: usize,
    pub beta: f64,
    pub sigma_sq: f64,
    pub mix: ScoreMix,
    pub distance: DistanceMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedSample {
    pub sample: Sample,
    pub score: ScoreCard,
    pub distance: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedSet {
    pub round: usize,
    pub samples: Vec<CuratedSample>,
}

/// One line of the per-round curation dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRow {
    pub round: usize,
    pub sample_id: u64,
    pub condition: ConditionId,
    pub alignment: f64,
    pub aesthetic: f64,
    pub composite: f64,
    pub distance: f64,
    pub weight: f64,
    pub selected: bool,
}

fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; values.len()]
    }
}

/// Scores every sample; the composite mixes per-pool min-max normalised
/// metrics (a constant metric normalises to 0.5).
pub fn score_pool(pool: &[Sample], world: &World, mix: &ScoreMix) -> Result<Vec<ScoreCard>> {
    if pool.is_empty() {
        return Err(Error::Empty("sample pool"));
    }
    mix.validate()?;
    let raw: Vec<(f64, f64)> = pool
        .par_iter()
        .map(|s| Ok((world.true_alignment(&s.x, s.condition)?, world.true_aesthetic(&s.x))))
        .collect::<Result<_>>()?;
    let al: Vec<f64> = raw.iter().map(|r| r.0).collect();
    let ae: Vec<f64> = raw.iter().map(|r| r.1).collect();
    let (nal, nae) = (min_max_normalize(&al), min_max_normalize(&ae));
    Ok((0..pool.len())
        .map(|i| ScoreCard {
            alignment: al[i],
            aesthetic: ae[i],
            composite: mix.mix(nal[i], nae[i]),
        })
        .collect())
}

/// Indices (ascending) of the `k_select` highest composites; ties go to the
/// smaller sample id.
pub fn preference_sample(pool: &[Sample], scores: &[ScoreCard], k_select: usize) -> Result<Vec<usize>> {
    if k_select == 0 {
        return Err(Error::InvalidArgument("k_select must be at least 1".into()));
    }
    if pool.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: pool.len(),
            got: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .composite
            .total_cmp(&scores[a].composite)
            .then(pool[a].id.cmp(&pool[b].id))
    });
    order.truncate(k_select);
    order.sort_unstable();
    Ok(order)
}

/// Uniformly random subset of size `min(k, n)`, returned ascending.
pub fn uniform_sample(n: usize, k_select: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let k = k_select.min(n);
    for i in 0..k {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Distance from `x` to the reference set (identity encoder).
pub fn distance_to_reference(x: &[f64], reference: &[RealVec], mode: DistanceMode) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    let dists = reference.iter().map(|r| r.dist(x));
    Ok(match mode {
        DistanceMode::MeanToReference => dists.sum::<f64>() / reference.len() as f64,
        DistanceMode::NearestInReference => dists.fold(f64::INFINITY, f64::min),
    })
}

/// `1` within `beta`, `exp(-(dist - beta) / sigma_sq)` beyond it.
pub fn compute_weight(dist: f64, beta: f64, sigma_sq: f64) -> Result<f64> {
    if !(sigma_sq > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_sq must be positive, got {sigma_sq}")));
    }
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be nonnegative, got {beta}")));
    }
    if !(dist >= 0.0) {
        return Err(Error::InvalidArgument(format!("distance must be nonnegative, got {dist}")));
    }
    // floor keeps far samples strictly positive after exp underflow
    Ok(if dist <= beta { 1.0 } else { (-(dist - beta) / sigma_sq).exp().max(f64::MIN_POSITIVE) })
}

/// Linear-interpolated percentile (`p` in `[0, 100]`) of unsorted data.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Data-driven weighting thresholds derived from the reference set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightCalibration {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    /// 90th percentile of reference self-distances.
    pub beta: f64,
    /// Half the interquartile range of reference self-distances.
    pub sigma_sq: f64,
}

/// Distance of every reference point to the rest of the reference set.
pub fn reference_self_distances(reference: &[RealVec], mode: DistanceMode) -> Result<Vec<f64>> {
    if reference.len() < 2 {
        return Err(Error::InvalidArgument("reference set needs at least two points".into()));
    }
    let n = reference.len();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let others = reference
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, r)| r.dist(&reference[i]));
            match mode {
                DistanceMode::MeanToReference => others.sum::<f64>() / (n - 1) as f64,
                DistanceMode::NearestInReference => others.fold(f64::INFINITY, f64::min),
            }
        })
        .collect())
}

pub fn calibrate_weighting(reference: &[RealVec], mode: DistanceMode) -> Result<WeightCalibration> {
    let d = reference_self_distances(reference, mode)?;
    let iqr = percentile(&d, 75.0) - percentile(&d, 25.0);
    let sigma_sq = if iqr > 0.0 { iqr / 2.0 } else { f64::MIN_POSITIVE };
    Ok(WeightCalibration {
        p50: percentile(&d, 50.0),
        p90: percentile(&d, 90.0),
        p99: percentile(&d, 99.0),
        beta: percentile(&d, 90.0),
        sigma_sq,
    })
}

/// How the training subset is drawn from the pool.
pub enum Selection<'a> {
    TopK,
    Uniform(&'a mut RngStream),
}

/// Full curation of one round's pool under a selection rule, optionally
/// with distribution weighting. Returns the curated set and one dump row
/// per pool sample (weights reported as applied: 1 when weighting is off).
pub fn curate_with(
    round: usize,
    pool: &[Sample],
    world: &World,
    reference: &[RealVec],
    cfg: &CurationConfig,
    selection: Selection<'_>,
    weighting: bool,
) -> Result<(CuratedSet, Vec<CurationRow>)> {
    if pool.is_empty() {
        return Err(Error::Empty("sample pool"));
    }
    if reference.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    let scores = score_pool(pool, world, &cfg.mix)?;
    let selected = match selection {
        Selection::TopK => preference_sample(pool, &scores, cfg.k_select)?,
        Selection::Uniform(rng) => {
            if cfg.k_select == 0 {
                return Err(Error::InvalidArgument("k_select must be at least 1".into()));
            }
            uniform_sample(pool.len(), cfg.k_select, rng)
        }
    };
    let distances: Vec<f64> = pool
        .par_iter()
        .map(|s| distance_to_reference(&s.x, reference, cfg.distance))
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = distances
        .iter()
        .map(|&d| if weighting { compute_weight(d, cfg.beta, cfg.sigma_sq) } else { Ok(1.0) })
        .collect::<Result<_>>()?;
    let mut is_sel = vec![false; pool.len()];
    for &i in &selected {
        is_sel[i] = true;
    }
    let rows = pool
        .iter()
        .enumerate()
        .map(|(i, s)| CurationRow {
            round,
            sample_id: s.id,
            condition: s.condition,
            alignment: scores[i].alignment,
            aesthetic: scores[i].aesthetic,
            composite: scores[i].composite,
            distance: distances[i],
            weight: weights[i],
            selected: is_sel[i],
        })
        .collect();
    let samples = selected
        .iter()
        .map(|&i| CuratedSample {
            sample: pool[i].clone(),
            score: scores[i],
            distance: distances[i],
            weight: weights[i],
        })
        .collect();
    Ok((CuratedSet { round, samples }, rows))
}

/// Preference sampling followed by distribution weighting.
pub fn curate(pool: &[Sample], world: &World, reference: &[RealVec], cfg: &CurationConfig) -> Result<CuratedSet> {
    let round = pool.first().map(|s| s.round).unwrap_or(0);
    Ok(curate_with(round, pool, world, reference, cfg, Selection::TopK, true)?.0)
}

pub fn write_curation_csv(path: &Path, rows: &[CurationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curation_csv(path: &Path) -> Result<Vec<CurationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldSpec;
    use proptest::prelude::*;

    fn sample(id: u64, x: &[f64], c: usize) -> Sample {
        Sample {
            id,
            round: 1,
            prompt_id: 0,
            condition: c,
            x: RealVec::new(x.to_vec()).unwrap(),
        }
    }

    fn card(c: f64) -> ScoreCard {
        ScoreCard {
            alignment: c,
            aesthetic: c,
            composite: c,
        }
    }

    fn world() -> World {
        World::new(WorldSpec::rings8()).unwrap()
    }

    #[test]
    fn single_sample_pool_is_neutral() {
        let s = score_pool(&[sample(0, &[1.0, 0.0], 0)], &world(), &ScoreMix::default()).unwrap();
        assert_eq!(s[0].composite, 0.5);
    }

    #[test]
    fn empty_pool_rejected() {
        assert!(score_pool(&[], &world(), &ScoreMix::default()).is_err());
    }

    #[test]
    fn alignment_only_mix_follows_alignment_ranks() {
        let w = world();
        let mut r = RngStream::new(3);
        let pool: Vec<Sample> = (0..50).map(|i| sample(i, &r.normals(2), (i % 8) as usize)).collect();
        let mix = ScoreMix { alignment: 1.0, aesthetic: 0.0 };
        let s = score_pool(&pool, &w, &mix).unwrap();
        for i in 0..50 {
            for j in 0..50 {
                if s[i].alignment < s[j].alignment {
                    assert!(s[i].composite <= s[j].composite);
                }
            }
        }
    }

    #[test]
    fn composite_matches_hand_rolled_oracle() {
        let w = world();
        let mut r = RngStream::new(10);
        let pool: Vec<Sample> = (0..10).map(|i| sample(i, &r.normals(2), (i % 3) as usize)).collect();
        let mix = ScoreMix { alignment: 0.3, aesthetic: 0.7 };
        let got = score_pool(&pool, &w, &mix).unwrap();
        // Oracle: column-wise spreadsheet arithmetic.
        let a: Vec<f64> = pool.iter().map(|s| w.true_alignment(&s.x, s.condition).unwrap()).collect();
        let e: Vec<f64> = pool.iter().map(|s| w.true_aesthetic(&s.x)).collect();
        let (amin, amax) = (a.iter().cloned().fold(9.0, f64::min), a.iter().cloned().fold(-9.0, f64::max));
        let (emin, emax) = (e.iter().cloned().fold(9.0, f64::min), e.iter().cloned().fold(-9.0, f64::max));
        for i in 0..10 {
            let want = 0.3 * (a[i] - amin) / (amax - amin) + 0.7 * (e[i] - emin) / (emax - emin);
            assert!((got[i].composite - want).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_examples() {
        let pool: Vec<Sample> = (0..3).map(|i| sample(i, &[0.0, 0.0], 0)).collect();
        let scores = vec![card(0.9), card(0.2), card(0.7)];
        assert_eq!(preference_sample(&pool, &scores, 2).unwrap(), vec![0, 2]);
        assert_eq!(preference_sample(&pool, &scores, 5).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn top_k_tie_break_by_id() {
        let pool = vec![sample(5, &[0.0, 0.0], 0), sample(2, &[0.0, 0.0], 0), sample(9, &[0.0, 0.0], 0)];
        let scores = vec![card(0.5), card(0.5), card(0.5)];
        assert_eq!(preference_sample(&pool, &scores, 1).unwrap(), vec![1]);
    }

    #[test]
    fn top_k_matches_full_sort_oracle() {
        let mut r = RngStream::new(77);
        let pool: Vec<Sample> = (0..1000).map(|i| sample(i, &[0.0, 0.0], 0)).collect();
        let scores: Vec<ScoreCard> = (0..1000).map(|_| card((r.uniform() * 50.0).floor() / 50.0)).collect();
        let got = preference_sample(&pool, &scores, 300).unwrap();
        // Oracle: insertion sort of (composite desc, id asc).
        let mut keyed: Vec<(f64, u64, usize)> = Vec::new();
        for (i, s) in scores.iter().enumerate() {
            let key = (s.composite, pool[i].id, i);
            let pos = keyed
                .iter()
                .position(|k| k.0 < key.0 || (k.0 == key.0 && k.1 > key.1))
                .unwrap_or(keyed.len());
            keyed.insert(pos, key);
        }
        let mut want: Vec<usize> = keyed[..300].iter().map(|k| k.2).collect();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn distance_examples() {
        let one = vec![RealVec::new(vec![0.3, 0.4]).unwrap()];
        assert_eq!(distance_to_reference(&[0.3, 0.4], &one, DistanceMode::MeanToReference).unwrap(), 0.0);
        let sym = vec![RealVec::new(vec![-1.0]).unwrap(), RealVec::new(vec![1.0]).unwrap()];
        assert_eq!(distance_to_reference(&[0.0], &sym, DistanceMode::MeanToReference).unwrap(), 1.0);
        assert!(distance_to_reference(&[0.0], &[], DistanceMode::MeanToReference).is_err());
    }

    #[test]
    fn distance_matches_double_loop() {
        let mut r = RngStream::new(2);
        let reference: Vec<RealVec> = (0..100).map(|_| RealVec::new(r.normals(3)).unwrap()).collect();
        for _ in 0..20 {
            let x = r.normals(3);
            let mut sum = 0.0;
            let mut best = f64::INFINITY;
            for p in &reference {
                let mut s2 = 0.0;
                for k in 0..3 {
                    s2 += (x[k] - p[k]) * (x[k] - p[k]);
                }
                sum += s2.sqrt();
                best = best.min(s2.sqrt());
            }
            let m = distance_to_reference(&x, &reference, DistanceMode::MeanToReference).unwrap();
            let n = distance_to_reference(&x, &reference, DistanceMode::NearestInReference).unwrap();
            assert!((m - sum / 100.0).abs() < 1e-12);
            assert_eq!(n, best);
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(compute_weight(2.0, 2.0, 0.5).unwrap(), 1.0);
        assert_eq!(compute_weight(0.0, 0.0, 0.5).unwrap(), 1.0);
        assert!((compute_weight(2.5, 2.0, 0.5).unwrap() - 0.367879441171442).abs() < 1e-12);
        assert!(compute_weight(1.0, 1.0, 0.0).is_err());
        assert!(compute_weight(1.0, 1.0, -2.0).is_err());
    }

    proptest! {
        #[test]
        fn weight_is_monotone_bounded_and_continuous(
            beta in 0.0f64..10.0, sigma_sq in 0.01f64..10.0, a in 0.0f64..50.0, b in 0.0f64..50.0
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let wl = compute_weight(lo, beta, sigma_sq).unwrap();
            let wh = compute_weight(hi, beta, sigma_sq).unwrap();
            prop_assert!(wh <= wl);
            prop_assert!(wh > 0.0 && wl <= 1.0);
            if lo <= beta { prop_assert_eq!(wl, 1.0); }
            let right = compute_weight(beta + 1e-12, beta, sigma_sq).unwrap();
            prop_assert!((right - 1.0).abs() < 1e-9);
        }

        #[test]
        fn selection_invariant_under_positive_scaling(
            comps in proptest::collection::vec(0.0f64..1.0, 1..60), k in 1usize..40, scale in 0.01f64..100.0
        ) {
            let pool: Vec<Sample> = (0..comps.len()).map(|i| sample(i as u64, &[0.0, 0.0], 0)).collect();
            let a: Vec<ScoreCard> = comps.iter().map(|&c| card(c)).collect();
            let b: Vec<ScoreCard> = comps.iter().map(|&c| card(c * scale)).collect();
            let sa = preference_sample(&pool, &a, k).unwrap();
            prop_assert_eq!(&sa, &preference_sample(&pool, &b, k).unwrap());
            prop_assert_eq!(sa.len(), k.min(comps.len()));
            let worst_sel = sa.iter().map(|&i| comps[i]).fold(f64::INFINITY, f64::min);
            for i in 0..comps.len() {
                if !sa.contains(&i) {
                    prop_assert!(comps[i] <= worst_sel);
                }
            }
        }
    }

    #[test]
    fn curate_all_in_reference_with_large_beta() {
        let w = world();
        let mut r = RngStream::new(4);
        let pool: Vec<Sample> = (0..30).map(|i| sample(i, &w.sample((i % 8) as usize, 1, &mut r).unwrap()[0], (i % 8) as usize)).collect();
        let reference: Vec<RealVec> = pool.iter().map(|s| s.x.clone()).collect();
        let cfg = CurationConfig {
            k_select: 10,
            beta: 1e6,
            sigma_sq: 1.0,
            mix: ScoreMix::default(),
            distance: DistanceMode::MeanToReference,
        };
        let set = curate(&pool, &w, &reference, &cfg).unwrap();
        assert_eq!(set.samples.len(), 10);
        assert!(set.samples.iter().all(|s| s.weight == 1.0));
    }

    #[test]
    fn curate_tiny_sigma_kills_off_reference_samples() {
        let w = world();
        let pool = vec![sample(0, &[0.5, 0.5], 0), sample(1, &[3.0, -1.0], 1)];
        let reference = vec![RealVec::new(vec![0.0, 0.0]).unwrap()];
        let cfg = CurationConfig {
            k_select: 2,
            beta: 0.0,
            sigma_sq: 1e-6,
            mix: ScoreMix::default(),
            distance: DistanceMode::NearestInReference,
        };
        let set = curate(&pool, &w, &reference, &cfg).unwrap();
        assert!(set.samples.iter().all(|s| s.weight < 1e-100));
    }

    /// End-to-end oracle: compose the independent scoring, sorting and
    /// distance oracles on a 20-sample fixture.
    #[test]
    fn curate_matches_composed_oracle() {
        let w = world();
        let mut r = RngStream::new(31);
        let pool: Vec<Sample> = (0..20)
            .map(|i| {
                let c = (i * 3 % 8) as usize;
                let mut x = w.sample(c, 1, &mut r).unwrap()[0].to_vec();
                x[0] += 0.5 * r.normal();
                sample(100 - i, &x, c)
            })
            .collect();
        let reference: Vec<RealVec> = (0..40).map(|i| w.sample(i % 8, 1, &mut r).unwrap().remove(0)).collect();
        let cfg = CurationConfig {
            k_select: 7,
            beta: 1.6,
            sigma_sq: 0.3,
            mix: ScoreMix { alignment: 0.6, aesthetic: 0.4 },
            distance: DistanceMode::MeanToReference,
        };
        let set = curate(&pool, &w, &reference, &cfg).unwrap();

        let a: Vec<f64> = pool.iter().map(|s| w.true_alignment(&s.x, s.condition).unwrap()).collect();
        let e: Vec<f64> = pool.iter().map(|s| w.true_aesthetic(&s.x)).collect();
        let norm = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            v.iter().map(|x| (x - lo) / (hi - lo)).collect::<Vec<_>>()
        };
        let (na, ne) = (norm(&a), norm(&e));
        let comp: Vec<f64> = (0..20).map(|i| 0.6 * na[i] + 0.4 * ne[i]).collect();
        let mut order: Vec<usize> = (0..20).collect();
        order.sort_by(|&i, &j| comp[j].partial_cmp(&comp[i]).unwrap().then(pool[i].id.cmp(&pool[j].id)));
        let mut chosen: Vec<usize> = order[..7].to_vec();
        chosen.sort();
        assert_eq!(set.samples.len(), 7);
        for (cs, &i) in set.samples.iter().zip(&chosen) {
            assert_eq!(cs.sample.id, pool[i].id);
            assert!((cs.score.composite - comp[i]).abs() < 1e-12);
            let d: f64 = reference
                .iter()
                .map(|p| ((pool[i].x[0] - p[0]).powi(2) + (pool[i].x[1] - p[1]).powi(2)).sqrt())
                .sum::<f64>()
                / 40.0;
            assert!((cs.distance - d).abs() < 1e-12);
            let wt = if d <= 1.6 { 1.0 } else { (-(d - 1.6) / 0.3).exp() };
            assert!((cs.weight - wt).abs() < 1e-12);
        }
    }

    #[test]
    fn percentile_and_calibration() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0, 4.0], 50.0), 2.5);
        assert_eq!(percentile(&[5.0], 90.0), 5.0);
        let reference: Vec<RealVec> = (0..11).map(|i| RealVec::new(vec![i as f64]).unwrap()).collect();
        let cal = calibrate_weighting(&reference, DistanceMode::NearestInReference).unwrap();
        assert_eq!(cal.beta, 1.0);
        assert_eq!(cal.sigma_sq, f64::MIN_POSITIVE);
        let cal = calibrate_weighting(&reference, DistanceMode::MeanToReference).unwrap();
        assert!(cal.sigma_sq > 0.0 && cal.p50 <= cal.p90 && cal.p90 <= cal.p99);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![CurationRow {
            round: 2,
            sample_id: 17,
            condition: 3,
            alignment: 0.123456789012345,
            aesthetic: 0.9,
            composite: 0.5,
            distance: 1.25,
            weight: 0.75,
            selected: true,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        write_curation_csv(&p, &rows).unwrap();
        assert_eq!(read_curation_csv(&p).unwrap(), rows);
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("round,sample_id,condition,alignment,aesthetic,composite,distance,weight,selected"));
    }
}
