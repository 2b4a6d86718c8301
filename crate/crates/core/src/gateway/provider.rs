//! Provider interfaces and the scripted test provider.

use std::collections::HashMap;
use std::sync::Mutex;

use serde_json::Value;

use super::PromptRequest;

/// A chat-completion backend. Returns raw response text; validation happens
/// in the gateway.
pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &PromptRequest) -> Result<String, String>;

    fn supports_model(&self, _model_id: &str) -> bool {
        true
    }
}

/// One scripted reply.
#[derive(Debug, Clone)]
pub enum Reply {
    Text(String),
    Fail(String),
}

impl Reply {
    pub fn json(v: Value) -> Self {
        Reply::Text(v.to_string())
    }
}

#[derive(Debug)]
struct Rule {
    schema_id: String,
    matcher: Value,
    replies: Vec<Reply>,
    served: usize,
}

/// Replies by schema id and a subset match on the request inputs. Each rule
/// serves its replies in order and repeats the last one once exhausted.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    rules: Mutex<Vec<Rule>>,
    calls: Mutex<HashMap<String, usize>>,
}

/// `pattern` matches `value` when every key in `pattern` is present in
/// `value` with a matching sub-value; non-object values must be equal.
pub fn subset_match(pattern: &Value, value: &Value) -> bool {
    match (pattern, value) {
        (Value::Object(p), Value::Object(v)) => p
            .iter()
            .all(|(k, pv)| v.get(k).is_some_and(|vv| subset_match(pv, vv))),
        _ => pattern == value,
    }
}

impl ScriptedProvider {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a rule; earlier rules take priority.
    pub fn on(self, schema_id: &str, matcher: Value, replies: Vec<Reply>) -> Self {
        assert!(!replies.is_empty(), "a rule needs at least one reply");
        self.rules.lock().unwrap().push(Rule {
            schema_id: schema_id.to_string(),
            matcher,
            replies,
            served: 0,
        });
        self
    }

    pub fn calls(&self, schema_id: &str) -> usize {
        self.calls
            .lock()
            .unwrap()
            .get(schema_id)
            .copied()
            .unwrap_or(0)
    }

    pub fn total_calls(&self) -> usize {
        self.calls.lock().unwrap().values().sum()
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(&self, request: &PromptRequest) -> Result<String, String> {
        *self
            .calls
            .lock()
            .unwrap()
            .entry(request.schema_id.clone())
            .or_insert(0) += 1;
        let mut rules = self.rules.lock().unwrap();
        let rule = rules
            .iter_mut()
            .find(|r| r.schema_id == request.schema_id && subset_match(&r.matcher, &request.inputs))
            .ok_or_else(|| format!("no scripted reply for schema `{}`", request.schema_id))?;
        let reply = rule.replies[rule.served.min(rule.replies.len() - 1)].clone();
        rule.served += 1;
        match reply {
            Reply::Text(t) => Ok(t),
            Reply::Fail(m) => Err(m),
        }
    }
}
