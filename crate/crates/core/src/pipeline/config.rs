//! Declarative run configuration, loaded from one TOML file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::{ContextCondition, ContextConfig};
use crate::error::{Error, Result};
use crate::gateway::heuristic::HeuristicProvider;
use crate::gateway::http::{api_key_var, OpenAiCompatible};
use crate::gateway::{DiskCache, FixtureLogprobs, Gateway, GatewayConfig, HashEmbedder};
use crate::memory::MemoryConfig;
use crate::prompts::ModelRoute;
use crate::segmentation::{SegmentationConfig, SelectionParams};
use crate::stats::lag::DEFAULT_MAX_LAG;

pub const MOCK_PROVIDER: &str = "mock";
pub const MOCK_MODEL: &str = "heuristic-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderSpec {
    Heuristic,
    OpenaiCompatible {
        base_url: String,
        #[serde(default)]
        models: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_timeout() -> u64 {
    120
}

fn mock_route() -> ModelRoute {
    ModelRoute::new(MOCK_PROVIDER, MOCK_MODEL)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Routes {
    pub segmentation: ModelRoute,
    pub memory: ModelRoute,
    pub summary: ModelRoute,
    pub rating: ModelRoute,
    pub claim_rating: ModelRoute,
}

impl Default for Routes {
    fn default() -> Self {
        Self {
            segmentation: mock_route(),
            memory: mock_route(),
            summary: mock_route(),
            rating: mock_route(),
            claim_rating: mock_route(),
        }
    }
}

impl Routes {
    fn all_mut(&mut self) -> [&mut ModelRoute; 5] {
        [
            &mut self.segmentation,
            &mut self.memory,
            &mut self.summary,
            &mut self.rating,
            &mut self.claim_rating,
        ]
    }

    fn all(&self) -> [&ModelRoute; 5] {
        [
            &self.segmentation,
            &self.memory,
            &self.summary,
            &self.rating,
            &self.claim_rating,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySettings {
    pub retries: usize,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub embedding_dim: usize,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            retries: 2,
            backoff_ms: 500,
            max_in_flight: 4,
            embedding_dim: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub episodes: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_ratings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSettings {
    pub segments_per_session: usize,
    pub params: SelectionParams,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        Self {
            segments_per_session: 4,
            params: SelectionParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSettings {
    pub max_lag: usize,
    pub ordinal: bool,
}

impl Default for StatsSettings {
    fn default() -> Self {
        Self {
            max_lag: DEFAULT_MAX_LAG,
            ordinal: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationSettings {
    pub bind: String,
    /// Append-only rating log, relative to the output directory.
    pub log: PathBuf,
    /// Bearer token → annotator id.
    pub tokens: BTreeMap<String, String>,
    pub prescreen_pass: f64,
    pub prescreen_tolerance: u8,
}

impl Default for AnnotationSettings {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            log: PathBuf::from("annotation/ratings.jsonl"),
            tokens: BTreeMap::new(),
            prescreen_pass: 0.8,
            prescreen_tolerance: 0,
        }
    }
}

fn default_seed() -> u64 {
    7
}

fn default_repeats() -> usize {
    3
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_cache() -> PathBuf {
    PathBuf::from(".cig-cache")
}

fn default_conditions() -> Vec<ContextCondition> {
    ContextCondition::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_cache")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_conditions")]
    pub conditions: Vec<ContextCondition>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub inputs: Inputs,
    #[serde(default)]
    pub providers: BTreeMap<String, ProviderSpec>,
    #[serde(default)]
    pub routes: Routes,
    #[serde(default)]
    pub gateway: GatewaySettings,
    #[serde(default)]
    pub segmentation: SegmentationConfig,
    #[serde(default)]
    pub selection: SelectionSettings,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub context: ContextConfig,
    #[serde(default)]
    pub stats: StatsSettings,
    #[serde(default)]
    pub annotation: AnnotationSettings,
}

/// Which provider registry a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProviderMode {
    /// The registry and routes from the config file.
    #[default]
    File,
    /// Every route goes to the offline heuristic provider.
    Mock,
}

impl std::str::FromStr for ProviderMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "file" => Ok(ProviderMode::File),
            "mock" => Ok(ProviderMode::Mock),
            other => Err(format!("unknown provider mode `{other}`")),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub conditions: Option<Vec<ContextCondition>>,
    pub providers: ProviderMode,
}

pub fn parse_conditions(list: &str) -> Result<Vec<ContextCondition>> {
    list.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

/// A loaded configuration whose relative paths resolve against `base_dir`.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: PipelineConfig,
    pub base_dir: PathBuf,
}

impl ResolvedConfig {
    pub fn load(path: impl AsRef<Path>, overrides: &Overrides) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base_dir, overrides)
    }

    pub fn from_toml(text: &str, base_dir: PathBuf, overrides: &Overrides) -> Result<Self> {
        let mut config: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        if let Some(o) = &overrides.out_dir {
            config.out_dir = o.clone();
        }
        if let Some(s) = overrides.seed {
            config.seed = s;
        }
        if let Some(c) = &overrides.conditions {
            config.conditions = c.clone();
        }
        if overrides.providers == ProviderMode::Mock {
            config.providers = BTreeMap::new();
            for r in config.routes.all_mut() {
                *r = mock_route();
            }
        }
        let resolved = Self { config, base_dir };
        resolved.validate()?;
        Ok(resolved)
    }

    fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.inputs.episodes.is_empty() {
            return Err(Error::config("inputs.episodes is empty"));
        }
        if c.conditions.is_empty() {
            return Err(Error::config("no context conditions selected"));
        }
        if c.repeats == 0 {
            return Err(Error::config("repeats must be at least 1"));
        }
        c.segmentation.validate()?;
        for r in c.routes.all() {
            if r.provider_id != MOCK_PROVIDER && !c.providers.contains_key(&r.provider_id) {
                return Err(Error::config(format!(
                    "route uses unregistered provider `{}`",
                    r.provider_id
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.out_dir)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.resolve(&self.config.cache_dir)
    }

    /// The configuration as stamped into outputs: everything that can change
    /// results, without output or cache locations.
    pub fn stamp(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(&self.config).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        obj.remove("out_dir");
        obj.remove("cache_dir");
        obj.remove("annotation");
        v
    }

    pub fn digest(&self) -> String {
        sha256_hex(
            serde_json::to_string(&self.stamp())
                .expect("stamp serializes")
                .as_bytes(),
        )
    }

    /// Builds the gateway: the offline heuristic provider is always present
    /// under `mock`; embeddings are hashed locally; log-probabilities come
    /// from the configured trace file.
    pub fn build_gateway(&self, cache: bool) -> Result<Gateway> {
        let g = &self.config.gateway;
        let mut gateway = Gateway::new(GatewayConfig {
            retries: g.retries,
            backoff: Duration::from_millis(g.backoff_ms),
            max_in_flight: g.max_in_flight,
        })
        .with_chat(MOCK_PROVIDER, Arc::new(HeuristicProvider::new()))
        .with_embedder(Arc::new(HashEmbedder::new(g.embedding_dim)));
        for (id, spec) in &self.config.providers {
            match spec {
                ProviderSpec::Heuristic => {
                    gateway = gateway.with_chat(id, Arc::new(HeuristicProvider::new()))
                }
                ProviderSpec::OpenaiCompatible {
                    base_url,
                    models,
                    timeout_secs,
                } => {
                    let mut p = OpenAiCompatible::new(
                        id,
                        base_url,
                        models.clone(),
                        Duration::from_secs(*timeout_secs),
                    )
                    .map_err(Error::config)?;
                    if let Ok(key) = std::env::var(api_key_var(id)) {
                        p = p.with_api_key(key);
                    }
                    gateway = gateway.with_chat(id, Arc::new(p));
                }
            }
        }
        if let Some(lp) = &self.config.inputs.logprobs {
            gateway = gateway.with_logprobs(Arc::new(FixtureLogprobs::load(self.resolve(lp))?));
        }
        if cache {
            gateway = gateway.with_cache(DiskCache::new(self.cache_dir().join("responses"))?);
        }
        Ok(gateway)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
