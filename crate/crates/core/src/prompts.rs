//! Per-round prompt sets: pluggable quality predicates, k-means diversity
//! selection over condition embeddings, and seeded per-round draws.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::ConditionId;
use crate::error::{Error, Result};
use crate::numkit::{sq_dist, RealVec, RngStream};
use crate::world::World;

/// One prompt in the pool. `condition` is the world condition it asks for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: u64,
    pub condition: ConditionId,
    pub label: String,
    pub embedding: RealVec,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tags: BTreeMap<String, bool>,
}

/// A named yes/no quality check on a prompt.
pub trait PromptPredicate: Send + Sync {
    fn name(&self) -> &str;
    fn check(&self, record: &PromptRecord) -> bool;
}

/// Accepts everything.
#[derive(Debug, Clone)]
pub struct PassThrough(pub String);

impl PromptPredicate for PassThrough {
    fn name(&self) -> &str {
        &self.0
    }

    fn check(&self, _: &PromptRecord) -> bool {
        true
    }
}

/// Accepts prompts whose embedding norm is at most `max_norm`. Vague prompts
/// sit far from every concept anchor and fail this.
#[derive(Debug, Clone)]
pub struct EmbeddingNormAtMost {
    pub name: String,
    pub max_norm: f64,
}

impl PromptPredicate for EmbeddingNormAtMost {
    fn name(&self) -> &str {
        &self.name
    }

    fn check(&self, record: &PromptRecord) -> bool {
        record.embedding.norm() <= self.max_norm
    }
}

/// Serializable predicate selection used by run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PredicateSpec {
    PassThrough { name: String },
    NormAtMost { name: String, max_norm: f64 },
}

impl PredicateSpec {
    pub fn build(&self) -> Box<dyn PromptPredicate> {
        match self {
            PredicateSpec::PassThrough { name } => Box::new(PassThrough(name.clone())),
            PredicateSpec::NormAtMost { name, max_norm } => Box::new(EmbeddingNormAtMost {
                name: name.clone(),
                max_norm: *max_norm,
            }),
        }
    }
}

/// Keeps records passing every predicate, in input order, tagging each kept
/// record with every predicate's verdict.
pub fn filter_prompts(records: &[PromptRecord], predicates: &[Box<dyn PromptPredicate>]) -> Vec<PromptRecord> {
    records
        .iter()
        .filter_map(|r| {
            let mut rec = r.clone();
            let mut ok = true;
            for p in predicates {
                let pass = p.check(r);
                rec.tags.insert(p.name().to_string(), pass);
                ok &= pass;
            }
            ok.then_some(rec)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<RealVec>,
    /// Record index -> centroid index.
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[RealVec], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let a = points
        .iter()
        .map(|p| {
            let (j, d) = nearest(p, centroids);
            inertia += d;
            j
        })
        .collect();
    (a, inertia)
}

fn distinct_count(points: &[RealVec]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort();
    keys.dedup();
    keys.len()
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &[RealVec], k: usize, max_iters: usize, rng: &mut RngStream) -> Result<ClusterModel> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let distinct = distinct_count(points);
    if k > distinct {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the {distinct} distinct points"
        )));
    }
    let dim = points[0].dim();
    if points.iter().any(|p| p.dim() != dim) {
        return Err(Error::InvalidArgument("embeddings have mixed dimensions".into()));
    }

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.below(points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut u = rng.uniform() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                pick = Some(i);
                if u < w {
                    break;
                }
                u -= w;
            }
        }
        let c = points[pick.expect("positive mass remains while k <= distinct")].to_vec();
        for (di, p) in d2.iter_mut().zip(points) {
            *di = di.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }

    let (mut assignment, inertia) = assign(points, &centroids);
    let mut trace = vec![inertia];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignment) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let (next, inertia) = assign(points, &centroids);
        trace.push(inertia);
        let stable = next == assignment;
        assignment = next;
        if stable {
            break;
        }
    }
    Ok(ClusterModel {
        centroids: centroids.into_iter().map(RealVec::new).collect::<Result<_>>()?,
        assignment,
        inertia: *trace.last().unwrap(),
        inertia_trace: trace,
        iterations,
    })
}

/// For every centroid, the `per_cluster` member records nearest to it (ties
/// by ascending record id). `records[i]` must correspond to
/// `model.assignment[i]`.
pub fn select_diverse(records: &[PromptRecord], model: &ClusterModel, per_cluster: usize) -> Result<Vec<PromptRecord>> {
    if per_cluster == 0 {
        return Err(Error::InvalidArgument("per_cluster must be at least 1".into()));
    }
    if records.len() != model.assignment.len() {
        return Err(Error::DimensionMismatch {
            expected: model.assignment.len(),
            got: records.len(),
        });
    }
    let mut out = Vec::new();
    for (j, c) in model.centroids.iter().enumerate() {
        let mut members: Vec<(f64, u64, usize)> = records
            .iter()
            .enumerate()
            .filter(|(i, _)| model.assignment[*i] == j)
            .map(|(i, r)| (sq_dist(&r.embedding, c), r.id, i))
            .collect();
        members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(members.into_iter().take(per_cluster).map(|(_, _, i)| records[i].clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DrawMode {
    /// Every round draws independently from the whole pool.
    #[default]
    Resampled,
    /// Rounds consume consecutive slices of one fixed permutation.
    Disjoint,
}

/// Draws round `round`'s prompt set of `per_round` distinct records.
pub fn build_round_prompts(
    pool: &[PromptRecord],
    round: usize,
    per_round: usize,
    mode: DrawMode,
    rng: &RngStream,
) -> Result<Vec<PromptRecord>> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    let picked: Vec<usize> = match mode {
        DrawMode::Resampled => {
            if per_round > pool.len() {
                return Err(Error::PoolExhausted {
                    round,
                    needed: per_round,
                    available: pool.len(),
                });
            }
            let mut r = rng.split(round as u64);
            for i in 0..per_round {
                let j = i + r.below(pool.len() - i);
                idx.swap(i, j);
            }
            idx.truncate(per_round);
            idx
        }
        DrawMode::Disjoint => {
            rng.split(u64::MAX).shuffle(&mut idx);
            let start = round * per_round;
            let available = pool.len().saturating_sub(start);
            if per_round > available {
                return Err(Error::PoolExhausted {
                    round,
                    needed: per_round,
                    available,
                });
            }
            idx[start..start + per_round].to_vec()
        }
    };
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}

/// Knobs for synthesising a prompt pool from a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolGenConfig {
    pub size: usize,
    /// Fraction of vague prompts: weak concept signal, large embedding noise.
    pub vague_fraction: f64,
    /// Concept `k` is drawn with probability proportional to `skew^k`.
    pub concept_skew: f64,
    pub clean_noise: f64,
    pub vague_noise: f64,
}

impl Default for PoolGenConfig {
    fn default() -> Self {
        PoolGenConfig {
            size: 2400,
            vague_fraction: 0.15,
            concept_skew: 0.7,
            clean_noise: 0.25,
            vague_noise: 1.5,
        }
    }
}

/// Synthesises a raw (unfiltered) prompt pool. Ids start at `first_id`.
pub fn generate_pool(world: &World, cfg: &PoolGenConfig, first_id: u64, rng: &RngStream) -> Result<Vec<PromptRecord>> {
    let conds = world.conditions();
    let probs: Vec<f64> = (0..conds.len()).map(|k| cfg.concept_skew.powi(k as i32)).collect();
    let total: f64 = probs.iter().sum();
    (0..cfg.size)
        .map(|i| {
            let mut r = rng.split(i as u64);
            let mut u = r.uniform() * total;
            let mut c = conds.len() - 1;
            for (k, p) in probs.iter().enumerate() {
                if u < *p {
                    c = k;
                    break;
                }
                u -= p;
            }
            let vague = r.uniform() < cfg.vague_fraction;
            let anchor = &conds[c].embedding;
            let (scale, noise) = if vague { (0.3, cfg.vague_noise) } else { (1.0, cfg.clean_noise) };
            let emb: Vec<f64> = anchor.iter().map(|a| scale * a + noise * r.normal()).collect();
            let id = first_id + i as u64;
            let label = if vague {
                format!("something like {} #{id}", conds[c].label)
            } else {
                format!("{} #{id}", conds[c].label)
            };
            Ok(PromptRecord {
                id,
                condition: c,
                label,
                embedding: RealVec::new(emb)?,
                tags: BTreeMap::new(),
            })
        })
        .collect()
}

/// Clean, balanced prompts reserved for evaluation.
pub fn heldout_prompts(world: &World, per_condition: usize, first_id: u64, noise: f64, rng: &RngStream) -> Result<Vec<PromptRecord>> {
    let mut out = Vec::new();
    for c in world.conditions() {
        for j in 0..per_condition {
            let id = first_id + (c.id * per_condition + j) as u64;
            let mut r = rng.split(id);
            let emb: Vec<f64> = c.embedding.iter().map(|a| a + noise * r.normal()).collect();
            out.push(PromptRecord {
                id,
                condition: c.id,
                label: format!("{} (held out) #{id}", c.label),
                embedding: RealVec::new(emb)?,
                tags: BTreeMap::new(),
            });
        }
    }
    Ok(out)
}

/// On-disk pool entry; `condition` is resolved to the nearest world
/// condition embedding when absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolEntry {
    id: u64,
    label: String,
    embedding: RealVec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    condition: Option<ConditionId>,
}

pub fn write_pool(path: &Path, records: &[PromptRecord]) -> Result<()> {
    let entries: Vec<PoolEntry> = records
        .iter()
        .map(|r| PoolEntry {
            id: r.id,
            label: r.label.clone(),
            embedding: r.embedding.clone(),
            condition: Some(r.condition),
        })
        .collect();
    let text = serde_json::to_string_pretty(&entries)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_pool(path: &Path, world: &World) -> Result<Vec<PromptRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<PoolEntry> = serde_json::from_str(&text)?;
    let conds = world.conditions();
    entries
        .into_iter()
        .map(|e| {
            let condition = match e.condition {
                Some(c) if c < conds.len() => c,
                Some(c) => return Err(Error::UnknownCondition(c)),
                None => {
                    if e.embedding.dim() != conds[0].embedding.dim() {
                        return Err(Error::DimensionMismatch {
                            expected: conds[0].embedding.dim(),
                            got: e.embedding.dim(),
                        });
                    }
                    conds
                        .iter()
                        .map(|c| (c.id, sq_dist(&c.embedding, &e.embedding)))
                        .min_by(|a, b| a.1.total_cmp(&b.1))
                        .unwrap()
                        .0
                }
            };
            Ok(PromptRecord {
                id: e.id,
                condition,
                label: e.label,
                embedding: e.embedding,
                tags: BTreeMap::new(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldSpec;

    fn rec(id: u64, emb: &[f64]) -> PromptRecord {
        PromptRecord {
            id,
            condition: 0,
            label: format!("r{id}"),
            embedding: RealVec::new(emb.to_vec()).unwrap(),
            tags: BTreeMap::new(),
        }
    }

    fn pts(v: &[f64]) -> Vec<RealVec> {
        v.iter().map(|x| RealVec::new(vec![*x]).unwrap()).collect()
    }

    struct Never;
    impl PromptPredicate for Never {
        fn name(&self) -> &str {
            "never"
        }
        fn check(&self, _: &PromptRecord) -> bool {
            false
        }
    }

    #[test]
    fn pass_through_is_identity_up_to_tags() {
        let rs: Vec<_> = (0..5).map(|i| rec(i, &[i as f64])).collect();
        let out = filter_prompts(&rs, &[Box::new(PassThrough("clarity".into()))]);
        assert_eq!(out.len(), 5);
        assert!(out.iter().zip(&rs).all(|(a, b)| a.id == b.id && a.tags["clarity"]));
    }

    #[test]
    fn always_false_empties() {
        let rs: Vec<_> = (0..5).map(|i| rec(i, &[i as f64])).collect();
        assert!(filter_prompts(&rs, &[Box::new(Never)]).is_empty());
    }

    #[test]
    fn norm_filter_matches_brute_force() {
        let mut r = RngStream::new(4);
        let rs: Vec<_> = (0..200).map(|i| rec(i, &r.normals(3).iter().map(|v| v * 2.5).collect::<Vec<_>>())).collect();
        let pred: Box<dyn PromptPredicate> = Box::new(EmbeddingNormAtMost { name: "specificity".into(), max_norm: 3.0 });
        let got: Vec<u64> = filter_prompts(&rs, &[pred]).iter().map(|r| r.id).collect();
        let mut want = Vec::new();
        for r in &rs {
            let n2: f64 = r.embedding.iter().map(|v| v * v).sum();
            if n2 <= 9.0 {
                want.push(r.id);
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn filtering_is_idempotent() {
        let mut r = RngStream::new(5);
        let rs: Vec<_> = (0..100).map(|i| rec(i, &r.normals(2).iter().map(|v| v * 3.0).collect::<Vec<_>>())).collect();
        let preds: Vec<Box<dyn PromptPredicate>> = vec![Box::new(EmbeddingNormAtMost { name: "n".into(), max_norm: 3.0 })];
        let once = filter_prompts(&rs, &preds);
        let twice = filter_prompts(&once, &preds);
        assert_eq!(once, twice);
    }

    #[test]
    fn kmeans_two_pairs() {
        let p = pts(&[0.0, 0.1, 10.0, 10.1]);
        let m = kmeans(&p, 2, 100, &mut RngStream::new(1)).unwrap();
        let mut cs: Vec<f64> = m.centroids.iter().map(|c| c[0]).collect();
        cs.sort_by(f64::total_cmp);
        assert_eq!(cs, vec![0.05, 10.05]);
    }

    #[test]
    fn kmeans_k_equals_n() {
        let p = pts(&[1.0, 4.0, -2.0, 7.5]);
        let m = kmeans(&p, 4, 10, &mut RngStream::new(3)).unwrap();
        assert_eq!(m.inertia, 0.0);
        for (i, x) in p.iter().enumerate() {
            assert_eq!(&m.centroids[m.assignment[i]], x);
        }
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let p = pts(&[1.0, 1.0, 2.0]);
        assert!(kmeans(&p, 3, 10, &mut RngStream::new(1)).is_err());
        assert!(kmeans(&p, 0, 10, &mut RngStream::new(1)).is_err());
    }

    #[test]
    fn kmeans_trace_nonincreasing_and_fixed_point() {
        let mut r = RngStream::new(12);
        let p: Vec<RealVec> = (0..300).map(|_| RealVec::new(r.normals(4)).unwrap()).collect();
        let m = kmeans(&p, 6, 100, &mut RngStream::new(2)).unwrap();
        for w in m.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        let cs: Vec<Vec<f64>> = m.centroids.iter().map(|c| c.to_vec()).collect();
        let mut total = 0.0;
        for (x, &j) in p.iter().zip(&m.assignment) {
            let (best, d) = nearest(x, &cs);
            assert_eq!(best, j);
            total += d;
        }
        assert!((total - m.inertia).abs() < 1e-9);
    }

    #[test]
    fn select_diverse_matches_brute_force() {
        let mut r = RngStream::new(7);
        let rs: Vec<_> = (0..60).map(|i| rec(i, &r.normals(2))).collect();
        let emb: Vec<RealVec> = rs.iter().map(|r| r.embedding.clone()).collect();
        let m = kmeans(&emb, 4, 50, &mut RngStream::new(9)).unwrap();
        let out = select_diverse(&rs, &m, 5).unwrap();
        let mut expected = Vec::new();
        for (j, c) in m.centroids.iter().enumerate() {
            let mut members: Vec<&PromptRecord> =
                rs.iter().enumerate().filter(|(i, _)| m.assignment[*i] == j).map(|(_, r)| r).collect();
            // Brute force: repeatedly extract the minimum.
            let mut chosen = Vec::new();
            while chosen.len() < 5 && !members.is_empty() {
                let mut bi = 0;
                for k in 1..members.len() {
                    let dk = members[k].embedding.dist(c);
                    let db = members[bi].embedding.dist(c);
                    if dk < db || (dk == db && members[k].id < members[bi].id) {
                        bi = k;
                    }
                }
                chosen.push(members.remove(bi).id);
            }
            expected.extend(chosen);
        }
        let got: Vec<u64> = out.iter().map(|r| r.id).collect();
        assert_eq!(got, expected);
        let sizes: usize = (0..4).map(|j| m.assignment.iter().filter(|&&a| a == j).count().min(5)).sum();
        assert_eq!(out.len(), sizes);
    }

    #[test]
    fn select_diverse_whole_and_singleton_clusters() {
        let rs: Vec<_> = [0.0, 0.1, 10.0, 10.1].iter().enumerate().map(|(i, v)| rec(i as u64, &[*v])).collect();
        let emb: Vec<RealVec> = rs.iter().map(|r| r.embedding.clone()).collect();
        let m = kmeans(&emb, 2, 10, &mut RngStream::new(1)).unwrap();
        assert_eq!(select_diverse(&rs, &m, 10).unwrap().len(), 4);
        let m4 = kmeans(&emb, 4, 10, &mut RngStream::new(1)).unwrap();
        assert_eq!(select_diverse(&rs, &m4, 1).unwrap().len(), 4);
    }

    #[test]
    fn round_draws() {
        let pool: Vec<_> = (0..40).map(|i| rec(i, &[i as f64])).collect();
        let rng = RngStream::new(3);
        let all = build_round_prompts(&pool, 0, 40, DrawMode::Resampled, &rng).unwrap();
        let mut ids: Vec<u64> = all.iter().map(|r| r.id).collect();
        ids.sort();
        assert_eq!(ids, (0..40).collect::<Vec<_>>());
        let a = build_round_prompts(&pool, 2, 10, DrawMode::Resampled, &rng).unwrap();
        let b = build_round_prompts(&pool, 2, 10, DrawMode::Resampled, &rng).unwrap();
        assert_eq!(a, b);
        let rounds: Vec<Vec<u64>> = (0..4)
            .map(|i| build_round_prompts(&pool, i, 10, DrawMode::Disjoint, &rng).unwrap().iter().map(|r| r.id).collect())
            .collect();
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert!(rounds[i].iter().all(|x| !rounds[j].contains(x)));
            }
        }
        assert!(matches!(
            build_round_prompts(&pool, 4, 10, DrawMode::Disjoint, &rng),
            Err(Error::PoolExhausted { .. })
        ));
    }

    #[test]
    fn generated_pool_file_round_trip() {
        let w = World::new(WorldSpec::rings8()).unwrap();
        let pool = generate_pool(&w, &PoolGenConfig { size: 50, ..Default::default() }, 0, &RngStream::new(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.json");
        write_pool(&path, &pool).unwrap();
        assert_eq!(read_pool(&path, &w).unwrap(), pool);
    }

    #[test]
    fn missing_condition_resolves_to_nearest_anchor() {
        let w = World::new(WorldSpec::rings8()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.json");
        std::fs::write(&path, r#"[{"id": 4, "label": "x", "embedding": [0,0,0,1.8,0,0,0,0.1]}]"#).unwrap();
        assert_eq!(read_pool(&path, &w).unwrap()[0].condition, 3);
    }
}
