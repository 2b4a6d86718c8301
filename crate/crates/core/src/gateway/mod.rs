//! Uniform access to chat, embedding and log-probability providers with
//! schema validation, retries, a content-addressed disk cache and latency
//! instrumentation.

pub mod cache;
pub mod embed;
pub mod heuristic;
pub mod http;
pub mod logprob;
pub mod provider;
pub mod schema;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
pub use cache::{CacheEntry, CacheKey, DiskCache};
pub use embed::{cosine, Embedder, HashEmbedder};
pub use logprob::{FixtureLogprobs, LogprobProvider, TokenLogprob};
pub use provider::{ChatProvider, Reply, ScriptedProvider};

/// Opaque decoding parameters passed through to the provider.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effort: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub provider_id: String,
    pub model_id: String,
    pub prompt_text: String,
    pub params: DecodingParams,
    pub schema_id: String,
    /// Structured template variables the prompt was rendered from. Mock
    /// providers read these instead of parsing prompt text. Not part of the
    /// cache key.
    #[serde(default)]
    pub inputs: Value,
    /// Latency label; defaults to the schema id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    /// Serve hits from the cache, store misses.
    #[default]
    Use,
    /// Always call the provider and overwrite the entry.
    Refresh,
    /// Neither read nor write.
    Off,
}

impl std::str::FromStr for CachePolicy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "use" => Ok(CachePolicy::Use),
            "refresh" => Ok(CachePolicy::Refresh),
            "off" => Ok(CachePolicy::Off),
            other => Err(format!("unknown cache policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub label: String,
    pub seconds: f64,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single record.
    pub std: f64,
    pub n: usize,
}

/// Per-label mean, sample std and count. Labels without records are absent.
pub fn latency_report(records: &[LatencyRecord]) -> BTreeMap<String, LatencyStats> {
    let mut by_label: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_label.entry(r.label.clone()).or_default().push(r.seconds);
    }
    by_label
        .into_iter()
        .filter(|(_, xs)| !xs.is_empty())
        .map(|(label, xs)| {
            let n = xs.len();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            (label, LatencyStats { mean, std, n })
        })
        .collect()
}

/// One provider attempt, kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub cache_key: String,
    pub schema_id: String,
    pub attempt: usize,
    pub raw_response: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub payload: Value,
    pub raw_response: String,
    pub from_cache: bool,
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub retries: usize,
    pub backoff: Duration,
    pub max_in_flight: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            retries: 2,
            backoff: Duration::from_millis(500),
            max_in_flight: 4,
        }
    }
}

struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            max: max.max(1),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

struct ChatEntry {
    provider: Arc<dyn ChatProvider>,
    limiter: Limiter,
    calls: AtomicU64,
}

pub struct Gateway {
    config: GatewayConfig,
    chat: HashMap<String, ChatEntry>,
    embedder: Option<Arc<dyn Embedder>>,
    logprobs: Option<Arc<dyn LogprobProvider>>,
    cache: Option<DiskCache>,
    latencies: Mutex<Vec<LatencyRecord>>,
    attempts: Mutex<Vec<AttemptRecord>>,
    embed_calls: AtomicU64,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut ids: Vec<&String> = self.chat.keys().collect();
        ids.sort();
        f.debug_struct("Gateway")
            .field("config", &self.config)
            .field("chat_providers", &ids)
            .field("cache", &self.cache.as_ref().map(|c| c.dir().to_path_buf()))
            .finish()
    }
}

fn now_secs() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Self {
        Self {
            config,
            chat: HashMap::new(),
            embedder: None,
            logprobs: None,
            cache: None,
            latencies: Mutex::new(Vec::new()),
            attempts: Mutex::new(Vec::new()),
            embed_calls: AtomicU64::new(0),
        }
    }

    pub fn with_chat(mut self, provider_id: &str, provider: Arc<dyn ChatProvider>) -> Self {
        self.chat.insert(
            provider_id.to_string(),
            ChatEntry {
                provider,
                limiter: Limiter::new(self.config.max_in_flight),
                calls: AtomicU64::new(0),
            },
        );
        self
    }

    pub fn with_embedder(mut self, embedder: Arc<dyn Embedder>) -> Self {
        self.embedder = Some(embedder);
        self
    }

    pub fn with_logprobs(mut self, provider: Arc<dyn LogprobProvider>) -> Self {
        self.logprobs = Some(provider);
        self
    }

    pub fn with_cache(mut self, cache: DiskCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Number of live calls made to a chat provider.
    pub fn provider_calls(&self, provider_id: &str) -> u64 {
        self.chat
            .get(provider_id)
            .map_or(0, |e| e.calls.load(Ordering::Relaxed))
    }

    pub fn total_provider_calls(&self) -> u64 {
        self.chat
            .values()
            .map(|e| e.calls.load(Ordering::Relaxed))
            .sum()
    }

    pub fn embed_calls(&self) -> u64 {
        self.embed_calls.load(Ordering::Relaxed)
    }

    pub fn latencies(&self) -> Vec<LatencyRecord> {
        self.latencies.lock().unwrap().clone()
    }

    pub fn latency_report(&self) -> BTreeMap<String, LatencyStats> {
        latency_report(&self.latencies.lock().unwrap())
    }

    pub fn attempts(&self) -> Vec<AttemptRecord> {
        self.attempts.lock().unwrap().clone()
    }

    pub fn has_logprobs(&self) -> bool {
        self.logprobs.is_some()
    }

    /// Sends a request (or serves it from the cache) and returns the
    /// schema-validated payload.
    pub fn complete(&self, request: &PromptRequest, policy: CachePolicy) -> Result<Completion> {
        if !schema::is_known(&request.schema_id) {
            return Err(Error::config(format!(
                "unknown schema `{}`",
                request.schema_id
            )));
        }
        let entry = self
            .chat
            .get(&request.provider_id)
            .ok_or_else(|| Error::config(format!("unknown provider `{}`", request.provider_id)))?;
        if !entry.provider.supports_model(&request.model_id) {
            return Err(Error::config(format!(
                "model `{}` is not registered for provider `{}`",
                request.model_id, request.provider_id
            )));
        }

        let key = CacheKey::for_request(request);
        let cache = self.cache.as_ref().filter(|_| policy != CachePolicy::Off);
        if policy == CachePolicy::Use {
            if let Some(hit) = cache.map(|c| c.get(&key)).transpose()?.flatten() {
                return Ok(Completion {
                    payload: hit.validated_payload,
                    raw_response: hit.raw_response,
                    from_cache: true,
                });
            }
        }

        let label = request
            .label
            .clone()
            .unwrap_or_else(|| request.schema_id.clone());
        let mut last_err = None;
        for attempt in 0..=self.config.retries {
            if attempt > 0 && !self.config.backoff.is_zero() {
                std::thread::sleep(self.config.backoff * 2u32.pow(attempt as u32 - 1));
            }
            let started = Instant::now();
            let result = {
                let _slot = entry.limiter.acquire();
                entry.calls.fetch_add(1, Ordering::Relaxed);
                entry.provider.complete(request)
            };
            let seconds = started.elapsed().as_secs_f64().max(1e-9);
            self.latencies.lock().unwrap().push(LatencyRecord {
                label: label.clone(),
                seconds,
                timestamp: now_secs(),
            });

            let mut record = AttemptRecord {
                cache_key: key.0.clone(),
                schema_id: request.schema_id.clone(),
                attempt,
                raw_response: None,
                error: None,
            };
            match result {
                Err(message) => {
                    tracing::warn!(provider = %request.provider_id, attempt, %message, "provider call failed");
                    record.error = Some(message.clone());
                    last_err = Some(Error::Provider {
                        provider: request.provider_id.clone(),
                        message,
                    });
                }
                Ok(raw) => {
                    record.raw_response = Some(raw.clone());
                    match schema::validate(&request.schema_id, &raw) {
                        Ok(payload) => {
                            self.attempts.lock().unwrap().push(record);
                            if let Some(c) = cache {
                                c.put(
                                    &key,
                                    &CacheEntry {
                                        request: request.clone(),
                                        raw_response: raw.clone(),
                                        validated_payload: payload.clone(),
                                        latency: seconds,
                                    },
                                )?;
                            }
                            return Ok(Completion {
                                payload,
                                raw_response: raw,
                                from_cache: false,
                            });
                        }
                        Err(message) => {
                            tracing::warn!(schema = %request.schema_id, attempt, %message, "schema validation failed");
                            record.error = Some(message.clone());
                            last_err = Some(Error::SchemaInvalid {
                                schema: request.schema_id.clone(),
                                message,
                                raw,
                            });
                        }
                    }
                }
            }
            self.attempts.lock().unwrap().push(record);
        }
        Err(last_err.expect("at least one attempt is made"))
    }

    /// Typed convenience over [`Gateway::complete`].
    pub fn complete_as<T: serde::de::DeserializeOwned>(
        &self,
        request: &PromptRequest,
        policy: CachePolicy,
    ) -> Result<T> {
        let c = self.complete(request, policy)?;
        Ok(serde_json::from_value(c.payload)?)
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let embedder = self
            .embedder
            .as_ref()
            .ok_or_else(|| Error::config("no embedder configured"))?;
        if texts.is_empty() {
            return Err(Error::validation("embed called with no texts"));
        }
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 && !self.config.backoff.is_zero() {
                std::thread::sleep(self.config.backoff * 2u32.pow(attempt as u32 - 1));
            }
            self.embed_calls.fetch_add(1, Ordering::Relaxed);
            let started = Instant::now();
            let result = embedder.embed(texts);
            self.latencies.lock().unwrap().push(LatencyRecord {
                label: "embed".into(),
                seconds: started.elapsed().as_secs_f64().max(1e-9),
                timestamp: now_secs(),
            });
            match result {
                Ok(vs) if vs.len() == texts.len() => return Ok(vs),
                Ok(vs) => last = format!("expected {} vectors, got {}", texts.len(), vs.len()),
                Err(e) => last = e,
            }
        }
        Err(Error::Provider {
            provider: embedder.id().to_string(),
            message: last,
        })
    }

    pub fn embed_one(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed(&[text.to_string()])?.remove(0))
    }

    /// `Ok(None)` when no log-probability provider is configured or it has no
    /// trace for the utterance.
    pub fn logprobs(
        &self,
        episode_id: &str,
        index: usize,
        text: &str,
    ) -> Result<Option<Vec<TokenLogprob>>> {
        match &self.logprobs {
            None => Ok(None),
            Some(p) => p
                .logprobs(episode_id, index, text)
                .map_err(|message| Error::Provider {
                    provider: "logprobs".into(),
                    message,
                }),
        }
    }
}
