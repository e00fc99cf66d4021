//! The recursive self-improvement loop, its baselines, run directories and
//! resume.
//!
//! Every random draw is keyed off the run seed by a fixed path, so a round
//! depends only on the config and the previous round's checkpoint. That is
//! what makes interrupted runs resume bit-for-bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{AblationParam, AblationSpec, GridValue, PoolSource, RunConfig, SelectionMode, Strategy};
use crate::curation::{
    calibrate_weighting, curate_with, percentile, reference_self_distances, write_curation_csv, CurationConfig, Sample,
    Selection, WeightCalibration,
};
use crate::diffusion::{
    generate_batch, make_schedule, train, ConditionId, DenoiserModel, ModelConfig, NoiseSchedule, TrainConfig,
    TrainExample, TrainReport,
};
use crate::error::{Error, Result};
use crate::metrics::{detect_peak, evaluate_round, EvalPlan, RoundMetrics};
use crate::numkit::{RealVec, RngStream};
use crate::prompts::{
    build_round_prompts, filter_prompts, generate_pool, heldout_prompts, kmeans, read_pool, select_diverse,
    ClusterModel, PromptRecord,
};
use crate::world::{HallucinationThreshold, World};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_CSV: &str = "metrics.csv";

/// Child stream ids under the run's root stream.
mod key {
    pub const BASE_INIT: u64 = 1;
    pub const BASE_TRAIN: u64 = 2;
    pub const REFERENCE: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const BASE_DATA: u64 = 5;
    pub const POOL: u64 = 6;
    pub const KMEANS: u64 = 7;
    pub const ROUND_PROMPTS: u64 = 8;
    pub const HALLUCINATION: u64 = 9;
    pub const HELDOUT: u64 = 10;
    pub const ROUNDS: u64 = 11;
}

const HELDOUT_FIRST_ID: u64 = 1 << 40;
const HELDOUT_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    Rsi,
    BaselineRandom,
    BaselineSft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    InProgress,
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub round: usize,
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
}

impl Checkpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION
            || !ck.model.is_finite()
            || ck.schedule.steps() != ck.model.config.horizon
        {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: "unsupported format or non-finite parameters".into(),
            });
        }
        Ok(ck)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptStats {
    pub raw: usize,
    pub filtered: usize,
    pub diverse: usize,
    pub cluster_sizes: Vec<usize>,
    pub kmeans_inertia: Vec<f64>,
}

/// Summary of the frozen base-model reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub count: usize,
    pub mean: Vec<f64>,
    pub calibration: WeightCalibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub size: usize,
    pub selected: usize,
    pub pool_mean_composite: f64,
    pub selected_mean_composite: f64,
    pub mean_weight: f64,
    pub min_weight: f64,
}

/// One model in the trajectory. Entry 0 is the base model; entry `k` is
/// the model fine-tuned on the curated output of entry `k - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub checkpoint: String,
    pub metrics_file: String,
    pub metrics: RoundMetrics,
    #[serde(default)]
    pub curation_file: Option<String>,
    #[serde(default)]
    pub prompt_ids: Vec<u64>,
    #[serde(default)]
    pub selected_ids: Vec<u64>,
    #[serde(default)]
    pub weights: Vec<f64>,
    #[serde(default)]
    pub pool: Option<PoolStats>,
    #[serde(default)]
    pub train_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub kind: RunKind,
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub strategy: Strategy,
    pub beta: f64,
    pub sigma_sq: f64,
    pub prompts: PromptStats,
    pub reference: ReferenceStats,
    pub base_train_losses: Vec<f64>,
    pub status: RunStatus,
    #[serde(default)]
    pub diverged_at: Option<usize>,
    pub rounds: Vec<RoundRecord>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported manifest schema {}",
                path.display(),
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?.as_bytes())
    }

    /// Metric trajectory, indexed by model.
    pub fn trajectory(&self, f: impl Fn(&RoundMetrics) -> f64) -> Vec<f64> {
        self.rounds.iter().map(|r| f(&r.metrics)).collect()
    }

    pub fn target_len(&self) -> usize {
        match self.kind {
            RunKind::BaselineSft => 2,
            _ => self.config.rounds + 1,
        }
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Everything a run shares with other strategies under the same seed:
/// world, base model, prompt pools, reference set and eval protocol.
#[derive(Debug, Clone)]
pub struct Lab {
    pub base_hash: String,
    pub world: World,
    pub schedule: NoiseSchedule,
    pub base_model: DenoiserModel,
    pub base_report: TrainReport,
    pub raw_pool: Vec<PromptRecord>,
    pub filtered_count: usize,
    pub curated_pool: Vec<PromptRecord>,
    pub clusters: ClusterModel,
    pub heldout: Vec<PromptRecord>,
    pub eval: EvalPlan,
    pub reference: Vec<RealVec>,
    pub calibration: WeightCalibration,
    pub base_metrics: RoundMetrics,
    root: RngStream,
}

pub fn model_config(cfg: &RunConfig, world: &World) -> ModelConfig {
    ModelConfig {
        data_dim: world.dim(),
        n_conditions: world.n_conditions(),
        embed_dim: cfg.diffusion.embed_dim,
        time_pairs: cfg.diffusion.time_pairs,
        hidden: cfg.diffusion.hidden.clone(),
        horizon: cfg.diffusion.steps,
    }
}

/// Pretrains the base model on world draws.
pub fn train_base(cfg: &RunConfig, world: &World, sched: &NoiseSchedule) -> Result<(DenoiserModel, TrainReport)> {
    let root = RngStream::new(cfg.seed);
    let init = DenoiserModel::new(model_config(cfg, world), &mut root.split(key::BASE_INIT))?;
    let data = root.split(key::BASE_DATA);
    let mut examples = Vec::new();
    for c in 0..world.n_conditions() {
        for x in world.sample(c, cfg.base.samples_per_condition, &mut data.split(c as u64))? {
            examples.push(TrainExample {
                id: examples.len() as u64,
                x0: x,
                condition: c,
                weight: 1.0,
            });
        }
    }
    train(&init, &examples, sched, &cfg.base.train, &root.split(key::BASE_TRAIN))
}

impl Lab {
    pub fn prepare(cfg: &RunConfig) -> Result<Lab> {
        cfg.validate()?;
        let world = World::new(cfg.world.resolve()?)?;
        let sched = make_schedule(cfg.diffusion.steps, cfg.diffusion.beta_min, cfg.diffusion.beta_max)?;
        let (model, report) = train_base(cfg, &world, &sched)?;
        Self::assemble(cfg, world, sched, model, report)
    }

    /// Rebuilds the lab around an existing base model (used on resume).
    pub fn with_base_model(cfg: &RunConfig, model: DenoiserModel) -> Result<Lab> {
        cfg.validate()?;
        let world = World::new(cfg.world.resolve()?)?;
        let sched = make_schedule(cfg.diffusion.steps, cfg.diffusion.beta_min, cfg.diffusion.beta_max)?;
        if model.config != model_config(cfg, &world) {
            return Err(Error::Config("base checkpoint does not match the model config".into()));
        }
        Self::assemble(cfg, world, sched, model, TrainReport::default())
    }

    fn assemble(
        cfg: &RunConfig,
        world: World,
        sched: NoiseSchedule,
        base_model: DenoiserModel,
        base_report: TrainReport,
    ) -> Result<Lab> {
        let root = RngStream::new(cfg.seed);
        let p = &cfg.prompts;
        let raw_pool = match &p.source {
            PoolSource::Generated(g) => generate_pool(&world, g, 0, &root.split(key::POOL))?,
            PoolSource::File { path } => read_pool(path, &world)?,
        };
        if raw_pool.is_empty() {
            return Err(Error::Empty("prompt pool"));
        }
        let preds: Vec<_> = p.predicates.iter().map(|s| s.build()).collect();
        let filtered = filter_prompts(&raw_pool, &preds);
        if filtered.is_empty() {
            return Err(Error::Empty("filtered prompt pool"));
        }
        let k = p.clusters.unwrap_or(world.n_conditions()).min(filtered.len());
        let points: Vec<RealVec> = filtered.iter().map(|r| r.embedding.clone()).collect();
        let clusters = kmeans(&points, k, p.kmeans_iters, &mut root.split(key::KMEANS))?;
        let curated_pool = select_diverse(&filtered, &clusters, p.per_cluster)?;

        let heldout = heldout_prompts(
            &world,
            p.heldout_per_condition,
            HELDOUT_FIRST_ID,
            HELDOUT_NOISE,
            &root.split(key::HELDOUT),
        )?;
        let threshold = HallucinationThreshold::calibrate(
            &world,
            cfg.eval.hallucination_quantile,
            cfg.eval.calibration_draws,
            &root.split(key::HALLUCINATION),
        )?;
        let eval_conds: Vec<ConditionId> =
            (0..cfg.eval.samples).map(|i| heldout[i % heldout.len()].condition).collect();
        let eval = EvalPlan::new(&world, eval_conds, threshold, cfg.curation.mix, &root.split(key::EVAL))?;

        let ref_conds: Vec<ConditionId> =
            (0..cfg.reference_size).map(|i| curated_pool[i % curated_pool.len()].condition).collect();
        let reference = generate_batch(&base_model, &ref_conds, &sched, &root.split(key::REFERENCE))?;
        let calibration = calibrate_weighting(&reference, cfg.curation.distance)?;
        let base_metrics = evaluate_round(&base_model, 0, &eval, &world, &sched)?;
        Ok(Lab {
            base_hash: cfg.base_hash()?,
            filtered_count: filtered.len(),
            world,
            schedule: sched,
            base_model,
            base_report,
            raw_pool,
            curated_pool,
            clusters,
            heldout,
            eval,
            reference,
            calibration,
            base_metrics,
            root,
        })
    }

    fn prompt_stats(&self) -> PromptStats {
        let mut sizes = vec![0; self.clusters.centroids.len()];
        for &a in &self.clusters.assignment {
            sizes[a] += 1;
        }
        PromptStats {
            raw: self.raw_pool.len(),
            filtered: self.filtered_count,
            diverse: self.curated_pool.len(),
            cluster_sizes: sizes,
            kmeans_inertia: self.clusters.inertia_trace.clone(),
        }
    }

    fn reference_stats(&self) -> ReferenceStats {
        let d = self.world.dim();
        let mut mean = vec![0.0; d];
        for x in &self.reference {
            for (m, v) in mean.iter_mut().zip(x.iter()) {
                *m += v / self.reference.len() as f64;
            }
        }
        ReferenceStats {
            count: self.reference.len(),
            mean,
            calibration: self.calibration,
        }
    }

    /// Prompt set of algorithm round `i` under a strategy.
    pub fn round_prompts(&self, cfg: &RunConfig, strategy: &Strategy, i: usize) -> Result<Vec<PromptRecord>> {
        let pool = if strategy.use_prompt_filtering { &self.curated_pool } else { &self.raw_pool };
        build_round_prompts(
            pool,
            i,
            cfg.prompts_per_round(),
            cfg.prompts.draw_mode,
            &self.root.split(key::ROUND_PROMPTS),
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replace an existing run directory's artifacts.
    pub force: bool,
    /// Stop (as if interrupted) once the trajectory holds model `n`.
    pub stop_after: Option<usize>,
    /// Called after each trajectory entry is persisted.
    pub on_round: Option<fn(&RunManifest, &RoundRecord)>,
}

fn rounds_dir(dir: &Path, k: usize) -> PathBuf {
    dir.join("rounds").join(format!("round_{k}"))
}

fn rel(k: usize, file: &str) -> String {
    format!("rounds/round_{k}/{file}")
}

fn clear_run_dir(dir: &Path) -> Result<()> {
    for f in [MANIFEST_FILE, METRICS_CSV] {
        let p = dir.join(f);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    for d in ["rounds", "reports"] {
        let p = dir.join(d);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

/// Runs the RSI loop (or a baseline) from scratch into `cfg.out_dir`.
pub fn run(cfg: &RunConfig, kind: RunKind, opts: &RunOptions) -> Result<RunManifest> {
    let cfg = normalize(cfg, kind);
    let lab = Lab::prepare(&cfg)?;
    run_with_lab(&cfg, &lab, kind, opts)
}

fn normalize(cfg: &RunConfig, kind: RunKind) -> RunConfig {
    let mut c = cfg.clone();
    if kind == RunKind::BaselineRandom {
        c.strategy = Strategy::none();
    }
    c
}

/// Like [`run`] but reusing a prepared lab (base model, pools, eval plan).
pub fn run_with_lab(cfg: &RunConfig, lab: &Lab, kind: RunKind, opts: &RunOptions) -> Result<RunManifest> {
    let cfg = normalize(cfg, kind);
    cfg.validate()?;
    if lab.base_hash != cfg.base_hash()? {
        return Err(Error::Config("prepared lab does not match this config".into()));
    }
    let dir = cfg.out_dir.clone();
    if dir.join(MANIFEST_FILE).exists() {
        if !opts.force {
            return Err(Error::RunExists(dir));
        }
        clear_run_dir(&dir)?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        kind,
        name: cfg.name.clone(),
        seed: cfg.seed,
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        strategy: cfg.strategy,
        beta: cfg.curation.beta.unwrap_or(lab.calibration.beta),
        sigma_sq: cfg.curation.sigma_sq.unwrap_or(lab.calibration.sigma_sq),
        prompts: lab.prompt_stats(),
        reference: lab.reference_stats(),
        base_train_losses: lab.base_report.epoch_losses.clone(),
        status: RunStatus::InProgress,
        diverged_at: None,
        rounds: Vec::new(),
    };
    let k0 = rounds_dir(&dir, 0);
    fs::create_dir_all(&k0).map_err(|e| Error::io(&k0, e))?;
    Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        round: 0,
        model: lab.base_model.clone(),
        schedule: lab.schedule.clone(),
    }
    .write(&k0.join("model.ckpt"))?;
    write_atomic(&k0.join("metrics.json"), serde_json::to_string_pretty(&lab.base_metrics)?.as_bytes())?;
    manifest.rounds.push(RoundRecord {
        round: 0,
        checkpoint: rel(0, "model.ckpt"),
        metrics_file: rel(0, "metrics.json"),
        metrics: lab.base_metrics.clone(),
        curation_file: None,
        prompt_ids: Vec::new(),
        selected_ids: Vec::new(),
        weights: Vec::new(),
        pool: None,
        train_losses: Vec::new(),
    });
    persist(&dir, &manifest)?;
    if let Some(f) = opts.on_round {
        f(&manifest, &manifest.rounds[0]);
    }
    continue_run(&dir, lab, manifest, lab.base_model.clone(), opts)
}

fn persist(dir: &Path, manifest: &RunManifest) -> Result<()> {
    write_metrics_csv(dir, manifest)?;
    manifest.write(dir)
}

fn write_metrics_csv(dir: &Path, m: &RunManifest) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "run",
        "round",
        "mmd_to_reference",
        "mean_composite",
        "mean_alignment",
        "mean_aesthetic",
        "hallucination_rate",
    ])?;
    for r in &m.rounds {
        let x = &r.metrics;
        w.write_record([
            m.name.clone(),
            r.round.to_string(),
            x.mmd_to_reference.to_string(),
            x.mean_composite.to_string(),
            x.mean_alignment.to_string(),
            x.mean_aesthetic.to_string(),
            x.hallucination_rate.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_atomic(&dir.join(METRICS_CSV), &bytes)
}

/// Resumes an interrupted run. With `expected` set, the stored config must
/// hash identically.
pub fn resume(dir: &Path, expected: Option<&RunConfig>, opts: &RunOptions) -> Result<RunManifest> {
    let manifest = RunManifest::read(dir)?;
    if manifest.config.hash()? != manifest.config_hash {
        return Err(Error::Config("manifest config does not match its recorded hash".into()));
    }
    if let Some(cfg) = expected {
        if normalize(cfg, manifest.kind).hash()? != manifest.config_hash {
            return Err(Error::Config(format!(
                "config differs from the one {} was started with",
                dir.display()
            )));
        }
    }
    match manifest.status {
        RunStatus::Completed => return Ok(manifest),
        RunStatus::Diverged => {
            return Err(Error::Divergence {
                round: manifest.diverged_at.unwrap_or(manifest.rounds.len()),
            })
        }
        RunStatus::InProgress => {}
    }
    let base = Checkpoint::read(&dir.join(&manifest.rounds[0].checkpoint))?.model;
    let mut cfg = manifest.config.clone();
    cfg.out_dir = dir.to_path_buf();
    let lab = Lab::with_base_model(&cfg, base)?;
    if lab.base_metrics != manifest.rounds[0].metrics {
        return Err(Error::Config("rebuilt base evaluation does not match the manifest".into()));
    }
    let last = manifest.rounds.last().expect("round 0 always present");
    let current = Checkpoint::read(&dir.join(&last.checkpoint))?.model;
    continue_run(dir, &lab, manifest, current, opts)
}

fn continue_run(
    dir: &Path,
    lab: &Lab,
    mut manifest: RunManifest,
    mut model: DenoiserModel,
    opts: &RunOptions,
) -> Result<RunManifest> {
    let cfg = manifest.config.clone();
    while manifest.rounds.len() < manifest.target_len() {
        if let Some(n) = opts.stop_after {
            if manifest.rounds.len() > n {
                return Ok(manifest);
            }
        }
        let k = manifest.rounds.len();
        match step(dir, &cfg, lab, &manifest, &model, k) {
            Ok((next, record)) => {
                model = next;
                manifest.rounds.push(record);
                persist(dir, &manifest)?;
                if let Some(f) = opts.on_round {
                    f(&manifest, &manifest.rounds[k]);
                }
            }
            Err(Error::Divergence { round }) => {
                manifest.status = RunStatus::Diverged;
                manifest.diverged_at = Some(round);
                persist(dir, &manifest)?;
                return Err(Error::Divergence { round });
            }
            Err(e) => return Err(e),
        }
    }
    manifest.status = RunStatus::Completed;
    persist(dir, &manifest)?;
    Ok(manifest)
}

/// Produces model `k` from model `k - 1`.
fn step(
    dir: &Path,
    cfg: &RunConfig,
    lab: &Lab,
    manifest: &RunManifest,
    model: &DenoiserModel,
    k: usize,
) -> Result<(DenoiserModel, RoundRecord)> {
    let i = k - 1;
    let strategy = &manifest.strategy;
    let rr = lab.root.derive(&[key::ROUNDS, i as u64]);
    let prompts = lab.round_prompts(cfg, strategy, i)?;
    let conds: Vec<ConditionId> = prompts
        .iter()
        .flat_map(|p| std::iter::repeat_n(p.condition, cfg.samples_per_prompt))
        .collect();
    let xs = generate_batch(model, &conds, &lab.schedule, &rr.split(0))?;
    let pool: Vec<Sample> = xs
        .into_iter()
        .enumerate()
        .map(|(j, x)| Sample {
            id: ((k as u64) << 32) | j as u64,
            round: i,
            prompt_id: prompts[j / cfg.samples_per_prompt].id,
            condition: conds[j],
            x,
        })
        .collect();

    let sft = manifest.kind == RunKind::BaselineSft;
    let ccfg = CurationConfig {
        k_select: if sft { pool.len() } else { cfg.curation.k_select.min(pool.len()) },
        beta: manifest.beta,
        sigma_sq: manifest.sigma_sq,
        mix: cfg.curation.mix,
        distance: cfg.curation.distance,
    };
    let mut sel_rng = rr.split(1);
    let selection = if sft || strategy.selection == SelectionMode::TopK {
        Selection::TopK
    } else {
        Selection::Uniform(&mut sel_rng)
    };
    let weighting = !sft && strategy.use_distribution_weighting;
    let (curated, rows) = curate_with(i, &pool, &lab.world, &lab.reference, &ccfg, selection, weighting)?;

    let examples: Vec<TrainExample> = curated
        .samples
        .iter()
        .map(|c| TrainExample {
            id: c.sample.id,
            x0: c.sample.x.clone(),
            condition: c.sample.condition,
            weight: c.weight,
        })
        .collect();
    let tcfg = if sft {
        TrainConfig {
            epochs: cfg.sft.epochs,
            ..cfg.finetune.clone()
        }
    } else {
        cfg.finetune.clone()
    };
    let (next, report) = match train(model, &examples, &lab.schedule, &tcfg, &rr.split(2)) {
        Ok(r) => r,
        Err(Error::NonFinite(_)) => return Err(Error::Divergence { round: k }),
        Err(e) => return Err(e),
    };
    if !next.is_finite() {
        return Err(Error::Divergence { round: k });
    }
    let metrics = evaluate_round(&next, k, &lab.eval, &lab.world, &lab.schedule)?;
    if !metrics.mmd_to_reference.is_finite() || !metrics.mean_composite.is_finite() {
        return Err(Error::Divergence { round: k });
    }

    let rd = rounds_dir(dir, k);
    fs::create_dir_all(&rd).map_err(|e| Error::io(&rd, e))?;
    write_curation_csv(&rd.join("curation.csv"), &rows)?;
    write_atomic(&rd.join("metrics.json"), serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    Checkpoint {
        format_version: CHECKPOINT_FORMAT_VERSION,
        round: k,
        model: next.clone(),
        schedule: lab.schedule.clone(),
    }
    .write(&rd.join("model.ckpt"))?;

    let n = rows.len() as f64;
    let sel_n = curated.samples.len() as f64;
    let weights: Vec<f64> = curated.samples.iter().map(|c| c.weight).collect();
    let pool_stats = PoolStats {
        size: rows.len(),
        selected: curated.samples.len(),
        pool_mean_composite: rows.iter().map(|r| r.composite).sum::<f64>() / n,
        selected_mean_composite: curated.samples.iter().map(|c| c.score.composite).sum::<f64>() / sel_n,
        mean_weight: weights.iter().sum::<f64>() / sel_n,
        min_weight: weights.iter().copied().fold(f64::INFINITY, f64::min),
    };
    let record = RoundRecord {
        round: k,
        checkpoint: rel(k, "model.ckpt"),
        metrics_file: rel(k, "metrics.json"),
        metrics,
        curation_file: Some(rel(k, "curation.csv")),
        prompt_ids: prompts.iter().map(|p| p.id).collect(),
        selected_ids: curated.samples.iter().map(|c| c.sample.id).collect(),
        weights,
        pool: Some(pool_stats),
        train_losses: report.epoch_losses,
    };
    Ok((next, record))
}

/// Outcome of one ablation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub parameter: String,
    pub value: String,
    pub seed: u64,
    pub run_dir: String,
    pub beta: f64,
    pub sigma_sq: f64,
    pub k_select: usize,
    pub strategy: String,
    pub final_mmd: f64,
    pub final_composite: f64,
    pub final_hallucination: f64,
    pub peak_round: usize,
    pub peak_composite: f64,
}

/// Applies one grid value to a config. `pNN` beta values resolve against
/// the lab's reference set.
pub fn apply_grid_value(cfg: &mut RunConfig, param: AblationParam, value: &GridValue, lab: &Lab) -> Result<()> {
    match (param, value) {
        (AblationParam::Beta, GridValue::Number(b)) => cfg.curation.beta = Some(*b),
        (AblationParam::Beta, v) => {
            let p = v.percentile().ok_or_else(|| Error::Config(format!("bad beta value '{}'", v.label())))?;
            let d = reference_self_distances(&lab.reference, cfg.curation.distance)?;
            cfg.curation.beta = Some(percentile(&d, p));
        }
        (AblationParam::SigmaSq, GridValue::Number(s)) => cfg.curation.sigma_sq = Some(*s),
        (AblationParam::KSelect, GridValue::Number(k)) => cfg.curation.k_select = *k as usize,
        (AblationParam::Strategy, GridValue::Text(t)) => cfg.strategy = Strategy::preset(t)?,
        (p, v) => return Err(Error::Config(format!("invalid value '{}' for {p:?}", v.label()))),
    }
    cfg.validate()
}

fn grid_dir_name(param: AblationParam, value: &GridValue) -> String {
    let p = serde_json::to_value(param).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    let v: String = value
        .label()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{p}_{v}")
}

/// One run per (grid value, seed) under `cfg.out_dir`, sharing each seed's
/// world, base model and reference set. Writes `ablation.csv` and returns
/// its rows.
pub fn run_ablation(cfg: &RunConfig, spec: &AblationSpec, opts: &RunOptions) -> Result<Vec<AblationRow>> {
    spec.validate()?;
    cfg.validate()?;
    let root = cfg.out_dir.clone();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let mut seeded = cfg.clone();
        seeded.seed = seed;
        let lab = Lab::prepare(&seeded)?;
        for value in &spec.values {
            let mut c = seeded.clone();
            apply_grid_value(&mut c, spec.parameter, value, &lab)?;
            let cell = grid_dir_name(spec.parameter, value);
            c.name = format!("{} {}", cfg.name, cell);
            c.out_dir = root.join(&cell).join(format!("seed_{seed}"));
            let m = run_with_lab(&c, &lab, RunKind::Rsi, opts)?;
            let comp = m.trajectory(|r| r.mean_composite);
            let peak = detect_peak(&comp)?;
            let last = &m.rounds.last().expect("nonempty trajectory").metrics;
            rows.push(AblationRow {
                parameter: spec.parameter.name().to_string(),
                value: value.label(),
                seed,
                run_dir: format!("{cell}/seed_{seed}"),
                beta: m.beta,
                sigma_sq: m.sigma_sq,
                k_select: c.curation.k_select,
                strategy: m.strategy.label(),
                final_mmd: last.mmd_to_reference,
                final_composite: last.mean_composite,
                final_hallucination: last.hallucination_rate,
                peak_round: peak,
                peak_composite: comp[peak],
            });
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_atomic(&root.join("ablation.csv"), &bytes)?;
    Ok(rows)
}
