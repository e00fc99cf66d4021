//! Run configuration: JSON with a versioned schema, every field defaulted,
//! unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curation::{DistanceMode, ScoreMix};
use crate::diffusion::TrainConfig;
use crate::error::{Error, Result};
use crate::numkit::AdamConfig;
use crate::prompts::{DrawMode, PoolGenConfig, PredicateSpec};
use crate::world::{WorldSpec, RINGS_8};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorldChoice {
    Builtin(String),
    Inline(Box<WorldSpec>),
}

impl WorldChoice {
    pub fn resolve(&self) -> Result<WorldSpec> {
        match self {
            WorldChoice::Builtin(name) => WorldSpec::builtin(name),
            WorldChoice::Inline(spec) => Ok((**spec).clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSettings {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub time_pairs: usize,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        DiffusionSettings {
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.2,
            hidden: vec![64, 64],
            embed_dim: 4,
            time_pairs: 4,
        }
    }
}

/// Pretraining of the base model on world data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseSettings {
    pub samples_per_condition: usize,
    pub train: TrainConfig,
}

impl Default for BaseSettings {
    fn default() -> Self {
        BaseSettings {
            samples_per_condition: 500,
            train: TrainConfig {
                epochs: 200,
                batch_size: 64,
                adam: AdamConfig {
                    lr: 3e-3,
                    ..AdamConfig::default()
                },
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationSettings {
    pub k_select: usize,
    /// `None` calibrates from the reference set.
    pub beta: Option<f64>,
    /// `None` calibrates from the reference set.
    pub sigma_sq: Option<f64>,
    pub mix: ScoreMix,
    pub distance: DistanceMode,
}

impl Default for CurationSettings {
    fn default() -> Self {
        CurationSettings {
            k_select: 300,
            beta: None,
            sigma_sq: None,
            mix: ScoreMix::default(),
            distance: DistanceMode::MeanToReference,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    TopK,
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub use_prompt_filtering: bool,
    pub use_preference_sampling: bool,
    pub use_distribution_weighting: bool,
    pub selection: SelectionMode,
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::full()
    }
}

impl Strategy {
    pub fn new(filtering: bool, preference: bool, weighting: bool) -> Self {
        Strategy {
            use_prompt_filtering: filtering,
            use_preference_sampling: preference,
            use_distribution_weighting: weighting,
            selection: if preference { SelectionMode::TopK } else { SelectionMode::UniformRandom },
        }
    }

    pub fn full() -> Self {
        Self::new(true, true, true)
    }

    pub fn none() -> Self {
        Self::new(false, false, false)
    }

    pub fn validate(&self) -> Result<()> {
        let topk = self.selection == SelectionMode::TopK;
        if topk != self.use_preference_sampling {
            return Err(Error::Config(
                "selection must be top-k exactly when use_preference_sampling is set".into(),
            ));
        }
        Ok(())
    }

    /// Named presets used by ablations.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "full" => Self::full(),
            "no-filtering" => Self::new(false, true, true),
            "no-preference" => Self::new(true, false, true),
            "no-weighting" => Self::new(true, true, false),
            "none" => Self::none(),
            other => return Err(Error::Config(format!("unknown strategy preset '{other}'"))),
        })
    }

    pub fn preset_names() -> [&'static str; 5] {
        ["full", "no-filtering", "no-preference", "no-weighting", "none"]
    }

    pub fn label(&self) -> String {
        for name in Self::preset_names() {
            if Self::preset(name).ok().as_ref() == Some(self) {
                return name.to_string();
            }
        }
        format!(
            "f{}p{}w{}",
            self.use_prompt_filtering as u8, self.use_preference_sampling as u8, self.use_distribution_weighting as u8
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PoolSource {
    Generated(PoolGenConfig),
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSettings {
    pub source: PoolSource,
    /// Clarity and specificity checks.
    pub predicates: Vec<PredicateSpec>,
    /// Defaults to the number of world conditions.
    pub clusters: Option<usize>,
    pub per_cluster: usize,
    pub kmeans_iters: usize,
    pub draw_mode: DrawMode,
    pub heldout_per_condition: usize,
}

impl Default for PromptSettings {
    fn default() -> Self {
        PromptSettings {
            source: PoolSource::Generated(PoolGenConfig::default()),
            predicates: vec![
                PredicateSpec::PassThrough { name: "clarity".into() },
                PredicateSpec::NormAtMost {
                    name: "specificity".into(),
                    max_norm: 3.0,
                },
            ],
            clusters: None,
            per_cluster: 80,
            kmeans_iters: 100,
            draw_mode: DrawMode::Resampled,
            heldout_per_condition: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub samples: usize,
    pub hallucination_quantile: f64,
    pub calibration_draws: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            samples: 1000,
            hallucination_quantile: 0.001,
            calibration_draws: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftSettings {
    pub epochs: usize,
}

impl Default for SftSettings {
    fn default() -> Self {
        SftSettings { epochs: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Display name used in reports.
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub world: WorldChoice,
    pub diffusion: DiffusionSettings,
    pub base: BaseSettings,
    pub finetune: TrainConfig,
    pub curation: CurationSettings,
    pub strategy: Strategy,
    pub prompts: PromptSettings,
    pub eval: EvalSettings,
    pub sft: SftSettings,
    pub rounds: usize,
    /// Synthetic samples generated per round.
    pub pool_size: usize,
    pub samples_per_prompt: usize,
    /// Size of the frozen base-model reference set.
    pub reference_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            name: "rsilab".into(),
            seed: 1,
            out_dir: PathBuf::from("runs/rsilab"),
            world: WorldChoice::Builtin(RINGS_8.into()),
            diffusion: DiffusionSettings::default(),
            base: BaseSettings::default(),
            finetune: TrainConfig {
                epochs: 30,
                batch_size: 32,
                adam: AdamConfig::default(),
            },
            curation: CurationSettings::default(),
            strategy: Strategy::full(),
            prompts: PromptSettings::default(),
            eval: EvalSettings::default(),
            sft: SftSettings::default(),
            rounds: 8,
            pool_size: 5000,
            samples_per_prompt: 10,
            reference_size: 5000,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.world.resolve()?;
        self.strategy.validate()?;
        self.curation.mix.validate()?;
        let d = &self.diffusion;
        if d.steps == 0 || !(d.beta_min > 0.0 && d.beta_min <= d.beta_max && d.beta_max < 1.0) {
            return bad("diffusion schedule needs steps >= 1 and 0 < beta_min <= beta_max < 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.samples_per_prompt == 0 || self.pool_size == 0 || self.pool_size % self.samples_per_prompt != 0 {
            return bad(format!(
                "pool_size ({}) must be a positive multiple of samples_per_prompt ({})",
                self.pool_size, self.samples_per_prompt
            ));
        }
        if self.curation.k_select == 0 {
            return bad("k_select must be at least 1".into());
        }
        if matches!(self.curation.sigma_sq, Some(s) if !(s > 0.0)) {
            return bad("sigma_sq must be positive".into());
        }
        if matches!(self.curation.beta, Some(b) if !(b >= 0.0)) {
            return bad("beta must be nonnegative".into());
        }
        if self.reference_size < 2 || self.eval.samples == 0 {
            return bad("reference_size must be >= 2 and eval.samples >= 1".into());
        }
        if self.finetune.batch_size == 0 || self.base.train.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.prompts.per_cluster == 0 || self.prompts.heldout_per_condition == 0 {
            return bad("per_cluster and heldout_per_condition must be positive".into());
        }
        if !(0.0..1.0).contains(&self.eval.hallucination_quantile) {
            return bad("hallucination_quantile must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Prompts drawn per round.
    pub fn prompts_per_round(&self) -> usize {
        self.pool_size / self.samples_per_prompt
    }

    /// Hash of everything that affects results (the output directory and
    /// display name are excluded).
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.name = String::new();
        let bytes = serde_json::to_vec(&c)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Hash of the settings shared by every strategy (world, base model,
    /// prompt pool, reference set, evaluation).
    pub fn base_hash(&self) -> Result<String> {
        let key = (
            self.seed,
            &self.world,
            &self.diffusion,
            &self.base,
            &self.prompts,
            &self.eval,
            self.reference_size,
            &self.curation.mix,
            self.curation.distance,
        );
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&key)?)))
    }
}

/// Parameter varied by an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationParam {
    Beta,
    SigmaSq,
    KSelect,
    Strategy,
}

impl AblationParam {
    pub fn name(self) -> &'static str {
        match self {
            AblationParam::Beta => "beta",
            AblationParam::SigmaSq => "sigma_sq",
            AblationParam::KSelect => "k_select",
            AblationParam::Strategy => "strategy",
        }
    }
}

impl std::str::FromStr for AblationParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "beta" => AblationParam::Beta,
            "sigma_sq" | "sigma-sq" => AblationParam::SigmaSq,
            "k_select" | "k-select" => AblationParam::KSelect,
            "strategy" | "strategy-flags" => AblationParam::Strategy,
            other => return Err(Error::Config(format!("unknown ablation parameter '{other}'"))),
        })
    }
}

/// One grid value. Numbers set the parameter directly; `pNN` (beta only)
/// picks that percentile of reference self-distances; strategy values are
/// preset names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridValue {
    Number(f64),
    Text(String),
}

impl GridValue {
    pub fn parse(s: &str) -> Self {
        match s.parse::<f64>() {
            Ok(v) => GridValue::Number(v),
            Err(_) => GridValue::Text(s.to_string()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            GridValue::Number(v) => format!("{v}"),
            GridValue::Text(t) => t.clone(),
        }
    }

    /// Percentile requested by a `pNN` value.
    pub fn percentile(&self) -> Option<f64> {
        match self {
            GridValue::Text(t) => t.strip_prefix('p').and_then(|r| r.parse::<f64>().ok()).filter(|p| (0.0..=100.0).contains(p)),
            GridValue::Number(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub parameter: AblationParam,
    pub values: Vec<GridValue>,
    pub seeds: Vec<u64>,
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("ablation grid and seed list must be nonempty".into()));
        }
        for v in &self.values {
            let ok = match (self.parameter, v) {
                (AblationParam::Beta, GridValue::Number(b)) => *b >= 0.0,
                (AblationParam::Beta, t) => t.percentile().is_some(),
                (AblationParam::SigmaSq, GridValue::Number(s)) => *s > 0.0,
                (AblationParam::KSelect, GridValue::Number(k)) => *k >= 1.0 && k.fract() == 0.0,
                (AblationParam::Strategy, GridValue::Text(t)) => Strategy::preset(t).is_ok(),
                _ => false,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "invalid value '{}' for ablation parameter {:?}",
                    v.label(),
                    self.parameter
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: AblationSpec =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"roundz": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"curation": {"k": 3}}"#).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::default();
        c.curation.beta = Some(1.25);
        c.world = WorldChoice::Inline(Box::new(WorldSpec::rings8()));
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"rounds": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"pool_size": 55}"#).is_err());
        assert!(RunConfig::from_json(r#"{"world": "moon"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"curation": {"sigma_sq": 0.0}}"#).is_err());
        let bad = r#"{"strategy": {"use_prompt_filtering": true, "use_preference_sampling": true,
            "use_distribution_weighting": true, "selection": "uniform-random"}}"#;
        assert!(RunConfig::from_json(bad).is_err());
    }

    #[test]
    fn presets() {
        for name in Strategy::preset_names() {
            let s = Strategy::preset(name).unwrap();
            s.validate().unwrap();
            assert_eq!(s.label(), name);
        }
        let none = Strategy::none();
        assert_eq!(none.selection, SelectionMode::UniformRandom);
    }

    #[test]
    fn ablation_values() {
        let spec = AblationSpec {
            parameter: "beta".parse().unwrap(),
            values: ["p50", "p90", "0.3"].iter().map(|s| GridValue::parse(s)).collect(),
            seeds: vec![1],
        };
        spec.validate().unwrap();
        assert_eq!(spec.values[1].percentile(), Some(90.0));
        let bad = AblationSpec {
            parameter: AblationParam::KSelect,
            values: vec![GridValue::Number(2.5)],
            seeds: vec![1],
        };
        assert!(bad.validate().is_err());
        let empty = AblationSpec {
            parameter: AblationParam::Strategy,
            values: vec![],
            seeds: vec![1],
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 2;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
