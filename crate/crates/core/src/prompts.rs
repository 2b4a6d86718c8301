//! Versioned prompt templates and request construction.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;
use crate::gateway::{CachePolicy, DecodingParams, Gateway, PromptRequest};

pub const VERSION: &str = "prompts/1";

pub const SEGMENTATION: &str = include_str!("../prompts/segmentation.txt");
pub const CLAIM_EXTRACTION: &str = include_str!("../prompts/claim_extraction.txt");
pub const NLI_JUDGMENT: &str = include_str!("../prompts/nli_judgment.txt");
pub const CLAIM_MERGE: &str = include_str!("../prompts/claim_merge.txt");
pub const SUMMARY_DIRECT: &str = include_str!("../prompts/summary_direct.txt");
pub const SUMMARY_RECURSIVE: &str = include_str!("../prompts/summary_recursive.txt");
pub const SUMMARY_THEME_AWARE: &str = include_str!("../prompts/summary_theme_aware.txt");
pub const SUMMARY_MEMORY_BASED: &str = include_str!("../prompts/summary_memory_based.txt");
pub const THEMES: &str = include_str!("../prompts/themes.txt");
pub const RUBRIC: &str = include_str!("../prompts/rubric.txt");
pub const RATING_INFO: &str = include_str!("../prompts/rating_info.txt");
pub const RATING_MIX: &str = include_str!("../prompts/rating_mix.txt");
pub const CLAIM_RATING: &str = include_str!("../prompts/claim_rating.txt");

/// Replaces `{{name}}` placeholders. Unknown placeholders are left intact.
pub fn render(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

/// Which provider and model a family of calls goes to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRoute {
    pub provider_id: String,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effort: Option<String>,
}

impl ModelRoute {
    pub fn new(provider_id: &str, model_id: &str) -> Self {
        Self {
            provider_id: provider_id.into(),
            model_id: model_id.into(),
            temperature: None,
            effort: None,
        }
    }

    pub fn request(
        &self,
        schema_id: &str,
        prompt_text: String,
        inputs: Value,
        seed: u64,
    ) -> PromptRequest {
        PromptRequest {
            provider_id: self.provider_id.clone(),
            model_id: self.model_id.clone(),
            prompt_text,
            params: DecodingParams {
                temperature: self.temperature,
                seed: Some(seed),
                effort: self.effort.clone(),
            },
            schema_id: schema_id.into(),
            inputs,
            label: None,
        }
    }
}

/// A route bound to a gateway, cache policy and seed: everything a stage
/// needs to issue calls.
#[derive(Debug, Clone, Copy)]
pub struct Caller<'a> {
    pub gateway: &'a Gateway,
    pub route: &'a ModelRoute,
    pub policy: CachePolicy,
    pub seed: u64,
}

impl Caller<'_> {
    pub fn request(&self, schema_id: &str, prompt_text: String, inputs: Value) -> PromptRequest {
        self.route
            .request(schema_id, prompt_text, inputs, self.seed)
    }

    pub fn call<T: serde::de::DeserializeOwned>(
        &self,
        schema_id: &str,
        prompt_text: String,
        inputs: Value,
    ) -> Result<T> {
        self.gateway
            .complete_as(&self.request(schema_id, prompt_text, inputs), self.policy)
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.gateway.embed_one(text)
    }
}
