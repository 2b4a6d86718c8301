//! Token log-probability traces (base 2).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    /// log2 p(token | prefix); always ≤ 0.
    pub logprob: f64,
}

pub trait LogprobProvider: Send + Sync {
    /// Trace for one utterance, or `None` when the provider has nothing for it.
    fn logprobs(
        &self,
        episode_id: &str,
        utterance_index: usize,
        text: &str,
    ) -> Result<Option<Vec<TokenLogprob>>, String>;
}

#[derive(Debug, Deserialize)]
struct FixtureLine {
    episode: String,
    index: usize,
    token: String,
    logprob: f64,
    #[serde(default)]
    special: bool,
}

/// Traces read from a line-delimited fixture of
/// `{episode, index, token, logprob, special?}` records. Special tokens are
/// masked out.
#[derive(Debug, Clone, Default)]
pub struct FixtureLogprobs {
    traces: BTreeMap<(String, usize), Vec<TokenLogprob>>,
}

impl FixtureLogprobs {
    pub fn parse(source: &str) -> Result<Self> {
        let mut traces: BTreeMap<(String, usize), Vec<TokenLogprob>> = BTreeMap::new();
        for (i, line) in source.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureLine = serde_json::from_str(line).map_err(|e| Error::Transcript {
                line: i + 1,
                message: format!("malformed logprob record: {e}"),
            })?;
            if rec.logprob > 0.0 || !rec.logprob.is_finite() {
                return Err(Error::Transcript {
                    line: i + 1,
                    message: format!("log-probability {} is not ≤ 0", rec.logprob),
                });
            }
            let trace = traces.entry((rec.episode, rec.index)).or_default();
            if !rec.special {
                trace.push(TokenLogprob {
                    token: rec.token,
                    logprob: rec.logprob,
                });
            }
        }
        Ok(Self { traces })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }
}

impl LogprobProvider for FixtureLogprobs {
    fn logprobs(
        &self,
        episode_id: &str,
        utterance_index: usize,
        _text: &str,
    ) -> Result<Option<Vec<TokenLogprob>>, String> {
        Ok(self
            .traces
            .get(&(episode_id.to_string(), utterance_index))
            .cloned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{"episode":"e","index":0,"token":"<s>","logprob":0.0,"special":true}
{"episode":"e","index":0,"token":"Rents","logprob":-9.5}
{"episode":"e","index":0,"token":" are","logprob":-2.0}
{"episode":"e","index":0,"token":" high","logprob":-4.25}
{"episode":"e","index":0,"token":".","logprob":-0.25}
"#;

    #[test]
    fn four_tokens_passthrough_with_special_masked() {
        let f = FixtureLogprobs::parse(FIXTURE).unwrap();
        let trace = f.logprobs("e", 0, "").unwrap().unwrap();
        assert_eq!(trace.len(), 4);
        let sum: f64 = trace.iter().map(|t| t.logprob).sum();
        let mean = sum / trace.len() as f64;
        assert!((sum - trace.len() as f64 * mean).abs() < 1e-12);
        assert_eq!(f.logprobs("e", 1, "").unwrap(), None);
    }

    #[test]
    fn positive_logprob_rejected() {
        let bad = r#"{"episode":"e","index":0,"token":"x","logprob":0.5}"#;
        assert!(FixtureLogprobs::parse(bad).is_err());
    }
}
