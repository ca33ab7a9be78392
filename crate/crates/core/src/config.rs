//! Application configuration: one JSON document with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::eval::uniform_edges;
use crate::features::FeatureConfig;
use crate::model::TrainConfig;
use crate::reranker::RerankParams;
use crate::simgen::WorldConfig;

/// Environment variable naming a config file when none is passed explicitly.
pub const CONFIG_ENV: &str = "CTXRANK_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Malformed(String),
    #[error("bad override `{0}`: expected key.path=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub users: PathBuf,
    /// Directory of day-partitioned log files.
    pub logs: PathBuf,
    /// Directory of trained models and their NE trajectories.
    pub models: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "run/corpus.jsonl".into(),
            users: "run/users.jsonl".into(),
            logs: "run/logs".into(),
            models: "run/models".into(),
            reports: "run/reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of uniform similarity buckets over [-1, 1].
    pub buckets: usize,
    /// Explicit bucket edges; overrides `buckets` when set.
    pub edges: Option<Vec<f64>>,
    /// Buckets with fewer impressions are not reported as populated.
    pub min_bucket_count: usize,
    /// Days simulated after the training days and used only for evaluation.
    pub holdout_days: usize,
    pub test_sessions: usize,
    pub mmr_lambda: f64,
    pub mmr_depth: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            buckets: 40,
            edges: None,
            min_bucket_count: 500,
            holdout_days: 50,
            test_sessions: 1000,
            mmr_lambda: 0.7,
            mmr_depth: 5,
        }
    }
}

impl EvalConfig {
    pub fn bucket_edges(&self) -> Vec<f64> {
        self.edges.clone().unwrap_or_else(|| uniform_edges(self.buckets))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// A session is dropped after this many requests without activity.
    pub session_idle_requests: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_idle_requests: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub paths: Paths,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub rerank: RerankParams,
    pub features: FeatureConfig,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        Self {
            paths: Paths::default(),
            features: world.feature_config(),
            world,
            train: TrainConfig::default(),
            rerank: RerankParams::default(),
            eval: EvalConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

/// Short names accepted in override paths.
const ALIASES: &[(&str, &str, &str)] = &[("rerank", "w", "window"), ("rerank", "k", "context_depth"), ("rerank", "p", "page_size")];

impl AppConfig {
    /// Loads `path` (or the defaults when `None`), applies `key.path=value`
    /// overrides in order, and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                serde_json::from_str(&text).map_err(|e| ConfigError::Malformed(e.to_string()))?
            }
            None => serde_json::to_value(Self::default()).map_err(|e| ConfigError::Malformed(e.to_string()))?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| ConfigError::Malformed(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config path from an explicit argument or the environment.
    pub fn resolve_path(explicit: Option<PathBuf>) -> Option<PathBuf> {
        explicit.or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.world.validate() {
            return invalid(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            return invalid(e.to_string());
        }
        if let Err(e) = self.rerank.validate() {
            return invalid(e.to_string());
        }
        if let Err(e) = self.features.validate() {
            return invalid(e);
        }
        if self.features.num_topics != self.world.num_topics {
            return invalid(format!(
                "features.num_topics ({}) must equal world.num_topics ({})",
                self.features.num_topics, self.world.num_topics
            ));
        }
        if self.features.feed_length != self.world.feed_length {
            return invalid(format!(
                "features.feed_length ({}) must equal world.feed_length ({})",
                self.features.feed_length, self.world.feed_length
            ));
        }
        if self.train.objective_task >= self.world.task_count {
            return invalid("train.objective_task must be below world.task_count".into());
        }
        if self.rerank.objective_task >= self.world.task_count {
            return invalid("rerank.objective_task must be below world.task_count".into());
        }
        let edges = self.eval.bucket_edges();
        if edges.len() < 2
            || edges.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
            || edges[0] > -1.0
            || edges[edges.len() - 1] < 1.0
        {
            return invalid("eval bucket edges must be strictly increasing and cover [-1, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.eval.mmr_lambda) {
            return invalid("eval.mmr_lambda must lie in [0, 1]".into());
        }
        if self.eval.mmr_depth == 0 {
            return invalid("eval.mmr_depth must be >= 1".into());
        }
        if self.service.session_idle_requests == 0 {
            return invalid("service.session_idle_requests must be >= 1".into());
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Sets `a.b.c=value` in a JSON tree. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::BadOverride(assignment.to_string());
    let (key, raw) = assignment.split_once('=').ok_or_else(bad)?;
    let mut parts: Vec<&str> = key.trim_start_matches("--").split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad());
    }
    if parts.len() == 2 {
        if let Some(&(_, _, full)) = ALIASES.iter().find(|(s, a, _)| *s == parts[0] && *a == parts[1]) {
            parts[1] = full;
        }
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let (last, prefix) = parts.split_last().ok_or_else(bad)?;
    let mut node = root;
    for p in prefix {
        let obj = node.as_object_mut().ok_or_else(bad)?;
        node = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut().ok_or_else(bad)?.insert(last.to_string(), value);
    Ok(())
}
