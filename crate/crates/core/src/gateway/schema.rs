//! Response schemas. Each validator parses raw provider text into a typed
//! payload and re-serializes it, so cached payloads are canonical.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SEGMENTATION: &str = "segmentation";
pub const CLAIM_EXTRACTION: &str = "claim_extraction";
pub const NLI_JUDGMENT: &str = "nli_judgment";
pub const CLAIM_MERGE: &str = "claim_merge";
pub const SUMMARY: &str = "summary";
pub const THEMES: &str = "themes";
pub const RATING_INFO: &str = "rating_info";
pub const RATING_MIX: &str = "rating_mix";
pub const CLAIM_RATING: &str = "claim_rating";

pub const ALL: [&str; 9] = [
    SEGMENTATION,
    CLAIM_EXTRACTION,
    NLI_JUDGMENT,
    CLAIM_MERGE,
    SUMMARY,
    THEMES,
    RATING_INFO,
    RATING_MIX,
    CLAIM_RATING,
];

pub fn is_known(schema_id: &str) -> bool {
    ALL.contains(&schema_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationPayload {
    pub segments: Vec<ProposedSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposedSegment {
    pub segment_index: usize,
    pub utterances_interval: [usize; 2],
    pub segment_subtopic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimExtractionPayload {
    pub memories: Vec<ExtractedClaim>,
}

/// Turn ids arrive either as integers or as numeric strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TurnId {
    Int(usize),
    Text(String),
}

impl TurnId {
    pub fn as_index(&self) -> Option<usize> {
        match self {
            TurnId::Int(i) => Some(*i),
            TurnId::Text(s) => s.trim().parse().ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedClaim {
    pub speaker: String,
    pub target_speaker: String,
    pub claim: String,
    pub turn_id: TurnId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliLabel {
    Entailment,
    Contradiction,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliPayload {
    pub label: NliLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePayload {
    pub claim: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryPayload {
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemesPayload {
    pub themes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfoRatingRow {
    pub index: usize,
    pub informativeness: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoRatingPayload {
    pub ratings: Vec<InfoRatingRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixRatingRow {
    pub index: usize,
    pub novelty: u8,
    pub relevance: u8,
    pub implication_scope: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRatingPayload {
    pub ratings: Vec<MixRatingRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimRatingRow {
    pub id: u64,
    pub informativeness: u8,
    pub novelty: u8,
    pub relevance: u8,
    pub implication_scope: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimRatingPayload {
    pub ratings: Vec<ClaimRatingRow>,
}

/// Pulls the JSON object out of a response that may be wrapped in prose or a
/// fenced code block.
pub fn extract_json(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    (end >= start).then(|| &raw[start..=end])
}

fn parse<T: DeserializeOwned>(raw: &str) -> Result<T, String> {
    let body = extract_json(raw).ok_or_else(|| "no JSON object in response".to_string())?;
    serde_json::from_str(body).map_err(|e| e.to_string())
}

fn level(name: &str, v: u8) -> Result<(), String> {
    if (1..=4).contains(&v) {
        Ok(())
    } else {
        Err(format!("{name} level {v} outside 1..=4"))
    }
}

fn non_empty(name: &str, s: &str) -> Result<(), String> {
    if s.trim().is_empty() {
        Err(format!("{name} is empty"))
    } else {
        Ok(())
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("payload types serialize")
}

/// Validates raw text against a registered schema, returning the canonical
/// payload. Unknown schema ids are rejected by the caller before any call.
pub fn validate(schema_id: &str, raw: &str) -> Result<Value, String> {
    match schema_id {
        SEGMENTATION => {
            let p: SegmentationPayload = parse(raw)?;
            if p.segments.is_empty() {
                return Err("no segments".into());
            }
            for s in &p.segments {
                let [a, b] = s.utterances_interval;
                if a > b {
                    return Err(format!(
                        "segment {} has start {a} > end {b}",
                        s.segment_index
                    ));
                }
            }
            Ok(to_value(&p))
        }
        CLAIM_EXTRACTION => {
            let p: ClaimExtractionPayload = parse(raw)?;
            for c in &p.memories {
                non_empty("claim", &c.claim)?;
                if c.turn_id.as_index().is_none() {
                    return Err(format!("turn_id {:?} is not an utterance index", c.turn_id));
                }
            }
            Ok(to_value(&p))
        }
        NLI_JUDGMENT => Ok(to_value(&parse::<NliPayload>(raw)?)),
        CLAIM_MERGE => {
            let p: MergePayload = parse(raw)?;
            non_empty("claim", &p.claim)?;
            Ok(to_value(&p))
        }
        SUMMARY => {
            let p: SummaryPayload = parse(raw)?;
            non_empty("summary", &p.summary)?;
            Ok(to_value(&p))
        }
        THEMES => {
            let p: ThemesPayload = parse(raw)?;
            if p.themes.is_empty() {
                return Err("no themes".into());
            }
            for t in &p.themes {
                non_empty("theme", t)?;
            }
            Ok(to_value(&p))
        }
        RATING_INFO => {
            let p: InfoRatingPayload = parse(raw)?;
            for r in &p.ratings {
                level("informativeness", r.informativeness)?;
            }
            Ok(to_value(&p))
        }
        RATING_MIX => {
            let p: MixRatingPayload = parse(raw)?;
            for r in &p.ratings {
                level("novelty", r.novelty)?;
                level("relevance", r.relevance)?;
                level("implication_scope", r.implication_scope)?;
            }
            Ok(to_value(&p))
        }
        CLAIM_RATING => {
            let p: ClaimRatingPayload = parse(raw)?;
            for r in &p.ratings {
                level("informativeness", r.informativeness)?;
                level("novelty", r.novelty)?;
                level("relevance", r.relevance)?;
                level("implication_scope", r.implication_scope)?;
            }
            Ok(to_value(&p))
        }
        other => Err(format!("unknown schema `{other}`")),
    }
}
