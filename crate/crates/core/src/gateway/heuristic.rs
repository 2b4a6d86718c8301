//! Deterministic rule-based chat provider.
//!
//! Answers every registered schema from the structured request inputs, so the
//! whole pipeline can run offline. Outputs depend only on the inputs and the
//! decoding seed.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::provider::ChatProvider;
use super::schema;
use super::PromptRequest;
use crate::text::{RuleAnalyzer, TextAnalyzer};

#[derive(Debug, Clone, Default)]
pub struct HeuristicProvider {
    analyzer: RuleAnalyzer,
}

const HEDGES: &[&str] = &[
    "i think",
    "i believe",
    "i guess",
    "i mean",
    "i feel like",
    "you know",
    "well",
    "so",
    "um",
    "uh",
    "honestly",
    "basically",
    "look",
    "and",
    "but",
    "actually",
];
const NEGATORS: &[&str] = &["not", "no", "never", "cannot", "nobody", "nothing", "none"];
const ANTONYMS: &[(&str, &str)] = &[
    ("increase", "decrease"),
    ("increas", "decreas"),
    ("raise", "lower"),
    ("high", "low"),
    ("higher", "lower"),
    ("more", "less"),
    ("support", "oppose"),
    ("good", "bad"),
    ("safe", "dangerous"),
    ("cheap", "expensive"),
    ("rise", "fall"),
    ("help", "hurt"),
    ("benefit", "harm"),
];
const COLORS: &[&str] = &[
    "black", "white", "red", "blue", "green", "brown", "grey", "gray", "orange", "yellow",
];
const HYPERNYMS: &[(&str, &str)] = &[
    ("cat", "pet"),
    ("dog", "pet"),
    ("handgun", "gun"),
    ("pistol", "gun"),
    ("rifle", "gun"),
    ("firearm", "gun"),
    ("apartment", "housing"),
    ("rent", "housing"),
];
const GENERAL_MARKERS: &[&str] = &[
    "everyone",
    "society",
    "always",
    "country",
    "nation",
    "policy",
    "law",
    "government",
    "public",
    "people",
    "community",
    "generally",
    "every",
    "whole",
    "citizen",
    "system",
];
const PERSONAL_MARKERS: &[&str] = &["i", "my", "me", "personally", "myself", "mine"];

fn hash_u64(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        cur.push(ch);
        if matches!(ch, '.' | '!' | '?') {
            let s = cur.trim().to_string();
            if !s.is_empty() {
                out.push(s);
            }
            cur.clear();
        }
    }
    let s = cur.trim().to_string();
    if !s.is_empty() {
        out.push(s);
    }
    out
}

fn strip_hedges(sentence: &str) -> String {
    let mut s = sentence.trim().to_string();
    loop {
        let lower = s.to_lowercase();
        let hit = HEDGES.iter().find(|h| {
            lower.starts_with(*h)
                && lower[h.len()..]
                    .chars()
                    .next()
                    .is_none_or(|c| !c.is_alphanumeric())
        });
        match hit {
            Some(h) => {
                s = s[h.len()..].trim_start_matches([',', ' ']).to_string();
            }
            None => break,
        }
    }
    if let Some(rest) = s.strip_prefix("that ") {
        s = rest.to_string();
    }
    let mut chars = s.chars();
    let mut out: String = match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    };
    let trimmed = out.trim_end_matches(['.', '!', ',', ';', ' ']).len();
    out.truncate(trimmed);
    if !out.is_empty() {
        out.push('.');
    }
    out
}

fn level_from_fraction(f: f64) -> u8 {
    if f >= 0.75 {
        4
    } else if f >= 0.5 {
        3
    } else if f >= 0.25 {
        2
    } else {
        1
    }
}

struct Aspects {
    novelty: u8,
    relevance: u8,
    scope: u8,
}

impl Aspects {
    fn cig(&self) -> u8 {
        self.novelty
            .min(self.relevance)
            .min(self.scope + 1)
            .clamp(1, 4)
    }
}

impl HeuristicProvider {
    pub fn new() -> Self {
        Self::default()
    }

    fn lemma_set(&self, text: &str) -> BTreeSet<String> {
        self.analyzer.content_lemmas(text).into_iter().collect()
    }

    fn expanded(&self, text: &str) -> BTreeSet<String> {
        let mut set = self.lemma_set(text);
        let extra: Vec<String> = set
            .iter()
            .filter_map(|l| {
                HYPERNYMS
                    .iter()
                    .find(|(w, _)| w == l)
                    .map(|(_, h)| h.to_string())
            })
            .collect();
        set.extend(extra);
        set
    }

    fn negated(&self, text: &str) -> bool {
        let count = self
            .analyzer
            .tokenize(text)
            .iter()
            .filter(|t| {
                let l = t.text.to_lowercase().replace('\u{2019}', "'");
                NEGATORS.contains(&l.as_str()) || l.ends_with("n't")
            })
            .count();
        count % 2 == 1
    }

    fn nli(&self, premise: &str, hypothesis: &str) -> &'static str {
        let p = self.expanded(premise);
        let h = self.lemma_set(hypothesis);
        let h_exp = self.expanded(hypothesis);
        if h.is_empty() || p.is_empty() {
            return "neutral";
        }
        let shared = p.intersection(&h_exp).count();
        let smaller = p.len().min(h_exp.len());

        let conflict = p.iter().any(|a| {
            h_exp.iter().any(|b| {
                a != b
                    && ((COLORS.contains(&a.as_str()) && COLORS.contains(&b.as_str()))
                        || ANTONYMS
                            .iter()
                            .any(|(x, y)| (a == x && b == y) || (a == y && b == x)))
            })
        });
        if conflict && 2 * shared >= smaller.saturating_sub(1).max(1) {
            return "contradiction";
        }
        let negation_differs = self.negated(premise) != self.negated(hypothesis);
        let union = p.union(&h_exp).count();
        if negation_differs && shared as f64 / union as f64 >= 0.6 {
            return "contradiction";
        }
        if !negation_differs && h.iter().all(|l| p.contains(l)) {
            return "entailment";
        }
        "neutral"
    }

    fn rate(&self, topic: &BTreeSet<String>, prior: &BTreeSet<String>, text: &str) -> Aspects {
        let lemmas = self.lemma_set(text);
        let n = lemmas.len();
        let new = lemmas.iter().filter(|l| !prior.contains(*l)).count();
        let mut novelty = level_from_fraction(if n == 0 { 0.0 } else { new as f64 / n as f64 });
        if n < 3 {
            novelty = novelty.min(2);
        }
        let mut relevance = 1 + u8::from(n >= 4) + u8::from(n >= 10);
        if lemmas.iter().any(|l| topic.contains(l)) {
            relevance += 1;
        }
        let words: Vec<String> = self
            .analyzer
            .tokenize(text)
            .into_iter()
            .filter(|t| t.is_word)
            .map(|t| t.text.to_lowercase())
            .collect();
        let general = words
            .iter()
            .filter(|w| GENERAL_MARKERS.contains(&w.as_str()))
            .count();
        let personal = words
            .iter()
            .filter(|w| PERSONAL_MARKERS.contains(&w.as_str()))
            .count();
        let mut scope: i32 = 2 + i32::from(general >= 1) + i32::from(general >= 2);
        if personal > general {
            scope -= 1;
        }
        Aspects {
            novelty,
            relevance: relevance.clamp(1, 4),
            scope: scope.clamp(1, 4) as u8,
        }
    }

    fn jitter(&self, level: u8, seed: u64, key: &str) -> u8 {
        let h = hash_u64(&[&seed.to_string(), key]);
        match h % 9 {
            0 => level.saturating_sub(1).max(1),
            1 => (level + 1).min(4),
            _ => level,
        }
    }

    fn segmentation(&self, inputs: &Value, seed: u64) -> Value {
        let utts = inputs["utterances"].as_array().cloned().unwrap_or_default();
        let run = inputs["run_index"].as_u64().unwrap_or(0);
        let target = inputs["target_words"]
            .as_array()
            .map(|a| {
                let lo = a.first().and_then(Value::as_f64).unwrap_or(450.0);
                let hi = a.get(1).and_then(Value::as_f64).unwrap_or(750.0);
                (lo + hi) / 2.0
            })
            .unwrap_or(600.0);
        let indices: Vec<usize> = utts
            .iter()
            .filter_map(|u| u["index"].as_u64())
            .map(|i| i as usize)
            .collect();
        let (Some(&first), Some(&last)) = (indices.first(), indices.last()) else {
            return json!({"segments": []});
        };
        let mut cuts = Vec::new();
        let mut words = 0.0;
        for u in &utts {
            let idx = u["index"].as_u64().unwrap_or(0) as usize;
            let w = crate::transcript::word_count(u["text"].as_str().unwrap_or("")) as f64;
            if words >= target && idx > first {
                let shift =
                    (hash_u64(&[&seed.to_string(), &run.to_string(), &cuts.len().to_string()]) % 3)
                        as i64
                        - 1;
                let cut = (idx as i64 + shift).clamp(first as i64 + 1, last as i64) as usize;
                if cuts.last().is_none_or(|&c| cut > c) {
                    cuts.push(cut);
                }
                words = 0.0;
            }
            words += w;
        }
        let mut starts = vec![first];
        starts.extend(cuts);
        let segments: Vec<Value> = starts
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                let e = starts.get(k + 1).map_or(last, |n| n - 1);
                let text: String = utts
                    .iter()
                    .filter(|u| (s..=e).contains(&(u["index"].as_u64().unwrap_or(0) as usize)))
                    .map(|u| u["text"].as_str().unwrap_or(""))
                    .collect::<Vec<_>>()
                    .join(" ");
                json!({
                    "segment_index": k,
                    "utterances_interval": [s, e],
                    "segment_subtopic": self.top_terms(&text, 3).join(", "),
                })
            })
            .collect();
        json!({ "segments": segments })
    }

    fn top_terms(&self, text: &str, k: usize) -> Vec<String> {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for l in self.analyzer.content_lemmas(text) {
            *freq.entry(l).or_insert(0) += 1;
        }
        let mut terms: Vec<(String, usize)> = freq.into_iter().collect();
        terms.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut out: Vec<String> = terms.into_iter().take(k).map(|(t, _)| t).collect();
        if out.is_empty() {
            out.push("general discussion".into());
        }
        out
    }

    fn extraction(&self, inputs: &Value) -> Value {
        let speaker = inputs["speaker"].as_str().unwrap_or("Speaker");
        let turn = inputs["turn_id"].clone();
        let text = inputs["utterance"].as_str().unwrap_or("");
        let memories: Vec<Value> = split_sentences(text)
            .into_iter()
            .filter(|s| !s.ends_with('?'))
            .map(|s| strip_hedges(&s))
            .filter(|c| self.analyzer.content_lemmas(c).len() >= 3)
            .map(|c| json!({"speaker": speaker, "target_speaker": "Everyone", "claim": c, "turn_id": turn}))
            .collect();
        json!({ "memories": memories })
    }

    fn merge(&self, inputs: &Value) -> Value {
        let new = inputs["new_claim"].as_str().unwrap_or("");
        let old = inputs["existing_claim"].as_str().unwrap_or("");
        let (ln, lo) = (self.lemma_set(new), self.lemma_set(old));
        let claim = if ln.is_superset(&lo) {
            new.to_string()
        } else if lo.is_superset(&ln) {
            old.to_string()
        } else {
            let head = old.trim_end_matches(['.', ' ']);
            let mut tail = new.trim().to_string();
            if let Some(c) = tail.get(..1) {
                tail.replace_range(..1, &c.to_lowercase());
            }
            format!("{head}, and {tail}")
        };
        json!({ "claim": claim })
    }

    fn summary(&self, inputs: &Value) -> Value {
        let topic = inputs["topic"].as_str().unwrap_or("the topic");
        let source = inputs["source"].as_str().unwrap_or("");
        let mut parts: Vec<String> = vec![format!(
            "The prior conversation concerned the question \"{topic}\" and the points raised so far are recapped here."
        )];
        if let Some(themes) = inputs["themes"].as_array() {
            let names: Vec<&str> = themes.iter().filter_map(Value::as_str).collect();
            if !names.is_empty() {
                parts.push(format!("The main themes were {}.", names.join("; ")));
            }
        }
        if let Some(prev) = inputs["previous_summary"]
            .as_str()
            .filter(|s| !s.is_empty())
        {
            let first = split_sentences(prev).into_iter().nth(1);
            if let Some(s) = first {
                parts.push(format!("Earlier, {}", lower_first(&s)));
            }
        }
        let count = |parts: &[String]| {
            parts
                .iter()
                .map(|p| crate::transcript::word_count(p))
                .sum::<usize>()
        };
        let sentences: Vec<String> = split_sentences(source)
            .into_iter()
            .filter(|s| self.analyzer.content_lemmas(s).len() >= 3)
            .collect();
        let mut round = 0;
        while count(&parts) < 230 && !sentences.is_empty() && round < 3 {
            for s in &sentences {
                let lead = if round == 0 {
                    "It was said that"
                } else {
                    "It was also repeated that"
                };
                let line = format!("{lead} {}", lower_first(&strip_hedges(s)));
                if count(&parts) + crate::transcript::word_count(&line) > 300 {
                    continue;
                }
                parts.push(line);
                if count(&parts) >= 250 {
                    break;
                }
            }
            round += 1;
        }
        let terms = self.top_terms(&format!("{topic} {source}"), 6);
        let fillers = [
            format!(
                "Recurring terms in the exchange included {}.",
                terms.join(", ")
            ),
            format!("Participants approached \"{topic}\" from several angles without settling it."),
            "Some contributions added new details while others restated earlier positions."
                .to_string(),
            "No single position was accepted by everyone at this stage of the discussion."
                .to_string(),
        ];
        let mut i = 0;
        while count(&parts) < 200 {
            parts.push(fillers[i % fillers.len()].clone());
            i += 1;
        }
        json!({ "summary": parts.join(" ") })
    }

    fn ratings(&self, inputs: &Value, seed: u64, mix: bool) -> Value {
        let topic = self.lemma_set(inputs["topic"].as_str().unwrap_or(""));
        let mut prior = self.lemma_set(inputs["prior"].as_str().unwrap_or(""));
        for w in inputs["window"].as_array().into_iter().flatten() {
            prior.extend(self.lemma_set(w["text"].as_str().unwrap_or("")));
        }
        let mut rows = Vec::new();
        for t in inputs["targets"].as_array().into_iter().flatten() {
            let index = t["index"].as_u64().unwrap_or(0);
            let text = t["text"].as_str().unwrap_or("");
            let a = self.rate(&topic, &prior, text);
            let key = index.to_string();
            if mix {
                rows.push(json!({
                    "index": index,
                    "novelty": self.jitter(a.novelty, seed, &format!("n{key}")),
                    "relevance": self.jitter(a.relevance, seed, &format!("r{key}")),
                    "implication_scope": self.jitter(a.scope, seed, &format!("s{key}")),
                    "context_type": "MIX",
                }));
            } else {
                rows.push(json!({
                    "index": index,
                    "informativeness": self.jitter(a.cig(), seed, &format!("c{key}")),
                    "context_type": "INFO",
                }));
            }
            prior.extend(self.lemma_set(text));
        }
        json!({ "ratings": rows })
    }

    fn claim_ratings(&self, inputs: &Value, seed: u64) -> Value {
        let topic = self.lemma_set(inputs["topic"].as_str().unwrap_or(""));
        let mut prior = BTreeSet::new();
        for m in inputs["memories"].as_array().into_iter().flatten() {
            prior.extend(self.lemma_set(m.as_str().unwrap_or("")));
        }
        let mut rows = Vec::new();
        for c in inputs["claims"].as_array().into_iter().flatten() {
            let id = c["id"].as_u64().unwrap_or(0);
            let text = c["claim"].as_str().unwrap_or("");
            let a = self.rate(&topic, &prior, text);
            let key = id.to_string();
            rows.push(json!({
                "id": id,
                "informativeness": self.jitter(a.cig(), seed, &format!("c{key}")),
                "novelty": self.jitter(a.novelty, seed, &format!("n{key}")),
                "relevance": self.jitter(a.relevance, seed, &format!("r{key}")),
                "implication_scope": self.jitter(a.scope, seed, &format!("s{key}")),
            }));
            prior.extend(self.lemma_set(text));
        }
        json!({ "ratings": rows })
    }
}

fn lower_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if chars.clone().next().is_some_and(|n| n.is_lowercase()) => {
            c.to_lowercase().chain(chars).collect()
        }
        Some(c) => std::iter::once(c).chain(chars).collect(),
        None => String::new(),
    }
}

impl ChatProvider for HeuristicProvider {
    fn complete(&self, request: &PromptRequest) -> Result<String, String> {
        let seed = request.params.seed.unwrap_or(0);
        let inputs = &request.inputs;
        let out = match request.schema_id.as_str() {
            schema::SEGMENTATION => self.segmentation(inputs, seed),
            schema::CLAIM_EXTRACTION => self.extraction(inputs),
            schema::NLI_JUDGMENT => json!({
                "label": self.nli(inputs["premise"].as_str().unwrap_or(""), inputs["hypothesis"].as_str().unwrap_or(""))
            }),
            schema::CLAIM_MERGE => self.merge(inputs),
            schema::SUMMARY => self.summary(inputs),
            schema::THEMES => json!({
                "themes": self.top_terms(&format!("{} {}", inputs["topic"].as_str().unwrap_or(""), inputs["source"].as_str().unwrap_or("")), 3)
            }),
            schema::RATING_INFO => self.ratings(inputs, seed, false),
            schema::RATING_MIX => self.ratings(inputs, seed, true),
            schema::CLAIM_RATING => self.claim_ratings(inputs, seed),
            other => {
                return Err(format!(
                    "heuristic provider has no rule for schema `{other}`"
                ))
            }
        };
        Ok(out.to_string())
    }
}
