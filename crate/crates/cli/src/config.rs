use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vrag_core::eval::Aggregation;
use vrag_core::gateway::GatewayConfig;
use vrag_core::retrieval::RetrievalConfig;
use vrag_core::reward::{RewardConfig, DEFAULT_EPSILON};

use crate::CliError;

/// Reads `[retrieval]` with self-exclusion on unless the file turns it off.
fn retrieval_settings<'de, D: serde::Deserializer<'de>>(d: D) -> Result<RetrievalConfig, D::Error> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Raw {
        k: Option<usize>,
        exclude_self: Option<bool>,
        metric: Option<vrag_core::retrieval::Metric>,
    }
    let raw = Raw::deserialize(d)?;
    let base = RetrievalConfig::default();
    Ok(RetrievalConfig {
        k: raw.k.unwrap_or(base.k),
        exclude_self: raw.exclude_self.unwrap_or(true),
        metric: raw.metric.unwrap_or(base.metric),
    })
}

/// Everything a pipeline run reads from the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for every randomized step. Required by commands that sample.
    pub seed: Option<u64>,
    pub corpus: CorpusPaths,
    pub templates_dir: Option<PathBuf>,
    #[serde(deserialize_with = "retrieval_settings")]
    pub retrieval: RetrievalConfig,
    pub reward: RewardSettings,
    pub gateway: GatewayRoles,
    pub dataset: DatasetSettings,
    pub evaluation: EvalSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: None,
            corpus: CorpusPaths::default(),
            templates_dir: None,
            retrieval: RetrievalConfig { exclude_self: true, ..RetrievalConfig::default() },
            reward: RewardSettings::default(),
            gateway: GatewayRoles::default(),
            dataset: DatasetSettings::default(),
            evaluation: EvalSettings::default(),
        }
    }
}

/// Input files. Relative paths resolve against the configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusPaths {
    /// Directory holding an entries file and vector file in row order.
    pub source_dir: Option<PathBuf>,
    /// Labelled frames: queries for retrieval, classification and inference.
    pub frames: Option<PathBuf>,
    /// Per-video frame counts for sampling.
    pub inventory: Option<PathBuf>,
    /// Frames to annotate with the teacher.
    pub annotation_jobs: Option<PathBuf>,
    /// Rollouts to score; defaults to the inference output.
    pub rollouts: Option<PathBuf>,
    /// Name shown in report rows.
    pub dataset_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSettings {
    #[serde(flatten)]
    pub config: RewardConfig,
    pub epsilon: f64,
}

impl Default for RewardSettings {
    fn default() -> Self {
        RewardSettings { config: RewardConfig::default(), epsilon: DEFAULT_EPSILON }
    }
}

/// Model id, decoding settings and transport for one gateway role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleConfig {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(flatten)]
    pub transport: GatewayConfig,
}

fn default_parallelism() -> usize {
    4
}

impl RoleConfig {
    fn new(model_id: &str, temperature: f64, max_tokens: u32) -> Self {
        RoleConfig {
            model_id: model_id.into(),
            temperature,
            max_tokens,
            parallelism: default_parallelism(),
            transport: GatewayConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayRoles {
    pub policy: RoleConfig,
    pub teacher: RoleConfig,
    pub judge: RoleConfig,
}

impl Default for GatewayRoles {
    fn default() -> Self {
        GatewayRoles {
            policy: RoleConfig::new("policy", 0.0, 1024),
            teacher: RoleConfig::new("teacher", 0.7, 2048),
            judge: RoleConfig::new("judge", 0.0, 64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSettings {
    /// Videos reserved for Stage-1 alignment.
    pub stage1_count: usize,
    /// Share of the remaining videos used for Stage-2.
    pub stage2_fraction: f64,
    /// Teacher attempts per sample, including the first.
    pub teacher_attempts: u32,
    pub real_frames: usize,
    pub fake_frames: usize,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        DatasetSettings {
            stage1_count: 2500,
            stage2_fraction: 0.5,
            teacher_attempts: 3,
            real_frames: 5000,
            fake_frames: 5000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreRule {
    /// Normalized answer-token probability, falling back to the hard rule.
    #[default]
    Logprob,
    /// 1 for Fake, 0 for Real, 0.5 when unparseable.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub aggregation: Aggregation,
    pub score_rule: ScoreRule,
    pub method_name: String,
    /// Judge models to run over the inference explanations.
    pub judge_models: Vec<String>,
    /// Per-sample compute of each pipeline component, in GFLOPs.
    pub cost_gflops: BTreeMap<String, f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            aggregation: Aggregation::Mean,
            score_rule: ScoreRule::Logprob,
            method_name: "vrag".into(),
            judge_models: Vec::new(),
            cost_gflops: BTreeMap::from([("retrieval".into(), 81.0), ("inference".into(), 22760.0)]),
        }
    }
}

impl PipelineConfig {
    /// Reads a TOML file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut().filter(|p| p.is_relative()) {
                *path = base.join(&*path);
            }
        };
        fix(&mut self.corpus.source_dir);
        fix(&mut self.corpus.frames);
        fix(&mut self.corpus.inventory);
        fix(&mut self.corpus.annotation_jobs);
        fix(&mut self.corpus.rollouts);
        fix(&mut self.templates_dir);
        for role in [&mut self.gateway.policy, &mut self.gateway.teacher, &mut self.gateway.judge] {
            fix(&mut role.transport.cache_dir);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.retrieval.validate().map_err(|e| CliError::Validation(format!("retrieval: {e}")))?;
        self.reward.config.validate().map_err(|e| CliError::Validation(format!("reward: {e}")))?;
        if !(self.reward.epsilon.is_finite() && self.reward.epsilon > 0.0) {
            return Err(CliError::Validation("reward.epsilon must be positive".into()));
        }
        for (name, role) in self.roles() {
            role.transport.validate().map_err(|e| CliError::Validation(format!("gateway.{name}: {e}")))?;
            if role.parallelism == 0 {
                return Err(CliError::Validation(format!("gateway.{name}.parallelism must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.dataset.stage2_fraction) {
            return Err(CliError::Validation("dataset.stage2_fraction must be within [0, 1]".into()));
        }
        if self.dataset.teacher_attempts == 0 {
            return Err(CliError::Validation("dataset.teacher_attempts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn roles(&self) -> [(&'static str, &RoleConfig); 3] {
        [("policy", &self.gateway.policy), ("teacher", &self.gateway.teacher), ("judge", &self.gateway.judge)]
    }

    /// Hex SHA-256 of the effective configuration as JSON.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
