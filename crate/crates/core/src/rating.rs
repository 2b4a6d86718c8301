//! Prompted ratings of utterances and claims, strict record persistence, and
//! claim-to-utterance aggregation over the operator grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::context::{ContextBundle, ContextCondition};
use crate::error::{Error, Result};
use crate::gateway::schema::{self, ClaimRatingPayload, InfoRatingPayload, MixRatingPayload};
use crate::prompts::{self, Caller};
use crate::transcript::fmt_f;

/// A rating on the 1..=4 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Level(u8);

impl Level {
    pub fn new(v: u8) -> Result<Self> {
        Self::try_from(v).map_err(Error::Validation)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn value(self) -> f64 {
        f64::from(self.0)
    }
}

impl TryFrom<u8> for Level {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        if (1..=4).contains(&v) {
            Ok(Level(v))
        } else {
            Err(format!("level {v} outside 1..=4"))
        }
    }
}

impl From<Level> for u8 {
    fn from(l: Level) -> u8 {
        l.0
    }
}

/// Model condition or human annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RatingCondition {
    Model(ContextCondition),
    Human,
}

impl fmt::Display for RatingCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RatingCondition::Model(c) => f.write_str(c.as_str()),
            RatingCondition::Human => f.write_str("human"),
        }
    }
}

impl FromStr for RatingCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "human" {
            Ok(RatingCondition::Human)
        } else {
            s.parse().map(RatingCondition::Model)
        }
    }
}

impl TryFrom<String> for RatingCondition {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
}

impl From<RatingCondition> for String {
    fn from(c: RatingCondition) -> String {
        c.to_string()
    }
}

/// Which rubric a record follows: overall CIG only, or the three aspects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingVariant {
    Info,
    Mix,
}

/// A rated construct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Cig,
    Novelty,
    Relevance,
    ImplicationScope,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::Cig,
        Dimension::Novelty,
        Dimension::Relevance,
        Dimension::ImplicationScope,
    ];
    pub const ASPECTS: [Dimension; 3] = [
        Dimension::Novelty,
        Dimension::Relevance,
        Dimension::ImplicationScope,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Cig => "cig",
            Dimension::Novelty => "novelty",
            Dimension::Relevance => "relevance",
            Dimension::ImplicationScope => "implication_scope",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scores {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cig: Option<Level>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub novelty: Option<Level>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<Level>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implication_scope: Option<Level>,
}

impl Scores {
    pub fn info(cig: Level) -> Self {
        Self {
            cig: Some(cig),
            ..Self::default()
        }
    }

    pub fn mix(novelty: Level, relevance: Level, implication_scope: Level) -> Self {
        Self {
            cig: None,
            novelty: Some(novelty),
            relevance: Some(relevance),
            implication_scope: Some(implication_scope),
        }
    }

    pub fn get(&self, d: Dimension) -> Option<Level> {
        match d {
            Dimension::Cig => self.cig,
            Dimension::Novelty => self.novelty,
            Dimension::Relevance => self.relevance,
            Dimension::ImplicationScope => self.implication_scope,
        }
    }

    /// The variant the score set belongs to, or `None` for a malformed mix.
    pub fn variant(&self) -> Option<RatingVariant> {
        match (
            self.cig,
            self.novelty,
            self.relevance,
            self.implication_scope,
        ) {
            (Some(_), None, None, None) => Some(RatingVariant::Info),
            (None, Some(_), Some(_), Some(_)) => Some(RatingVariant::Mix),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatingRecord {
    pub episode_id: String,
    pub segment_index: usize,
    pub utterance_index: usize,
    pub source_id: String,
    pub condition: RatingCondition,
    pub scores: Scores,
}

/// Persistence key: a source rates each utterance at most once per variant.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecordKey {
    pub episode_id: String,
    pub segment_index: usize,
    pub utterance_index: usize,
    pub source_id: String,
    pub condition: RatingCondition,
    pub variant: RatingVariant,
}

impl RatingRecord {
    pub fn variant(&self) -> RatingVariant {
        self.scores
            .variant()
            .expect("records are validated on construction and parse")
    }

    pub fn key(&self) -> RecordKey {
        RecordKey {
            episode_id: self.episode_id.clone(),
            segment_index: self.segment_index,
            utterance_index: self.utterance_index,
            source_id: self.source_id.clone(),
            condition: self.condition,
            variant: self.variant(),
        }
    }

    pub fn utterance(&self) -> UtteranceKey {
        UtteranceKey {
            episode_id: self.episode_id.clone(),
            utterance_index: self.utterance_index,
        }
    }
}

/// Serializes records as JSON lines in the given order.
pub fn records_to_jsonl(records: &[RatingRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

/// Strict parse: unknown fields, out-of-range levels, malformed score sets and
/// duplicate keys are all rejected.
pub fn parse_records(text: &str) -> Result<Vec<RatingRecord>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: RatingRecord = serde_json::from_str(line).map_err(|e| Error::Transcript {
            line: i + 1,
            message: e.to_string(),
        })?;
        if r.scores.variant().is_none() {
            return Err(Error::Transcript {
                line: i + 1,
                message: "scores must be cig only or all three aspects".into(),
            });
        }
        if !seen.insert(r.key()) {
            return Err(Error::Transcript {
                line: i + 1,
                message: "duplicate rating key".into(),
            });
        }
        out.push(r);
    }
    Ok(out)
}

/// Compares returned indices with the expected set.
pub fn check_indices<T: Ord + Copy + fmt::Debug>(
    what: &str,
    expected: &[T],
    got: &[T],
) -> Result<()> {
    let want: BTreeSet<T> = expected.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let mut duplicate = BTreeSet::new();
    for g in got {
        if !seen.insert(*g) {
            duplicate.insert(*g);
        }
    }
    let missing: Vec<T> = want.difference(&seen).copied().collect();
    let extra: Vec<T> = seen.difference(&want).copied().collect();
    if missing.is_empty() && extra.is_empty() && duplicate.is_empty() {
        return Ok(());
    }
    Err(Error::validation(format!(
        "{what} mismatch: missing {missing:?}, extra {extra:?}, duplicate {:?}",
        duplicate.into_iter().collect::<Vec<_>>()
    )))
}

fn bundle_inputs(bundle: &ContextBundle) -> serde_json::Value {
    json!({
        "topic": bundle.topic,
        "prior": bundle.prior.text(),
        "window": bundle.window,
        "targets": bundle.target_lines().collect::<Vec<_>>(),
    })
}

fn bundle_prompt(template: &str, bundle: &ContextBundle) -> String {
    prompts::render(
        template,
        &[
            ("rubric", prompts::RUBRIC.to_string()),
            ("topic", bundle.topic.clone()),
            ("prior", bundle.prior_text()),
            ("window", bundle.window_text()),
            ("targets", bundle.targets_text()),
        ],
    )
}

fn record(
    bundle: &ContextBundle,
    source_id: &str,
    utterance_index: usize,
    scores: Scores,
) -> RatingRecord {
    RatingRecord {
        episode_id: bundle.episode_id.clone(),
        segment_index: bundle.segment_index,
        utterance_index,
        source_id: source_id.into(),
        condition: RatingCondition::Model(bundle.condition),
        scores,
    }
}

/// One overall-CIG record per target, in target order.
pub fn rate_segment_info(
    bundle: &ContextBundle,
    source_id: &str,
    caller: &Caller,
) -> Result<Vec<RatingRecord>> {
    if bundle.targets.is_empty() {
        return Err(Error::validation(format!(
            "segment {} has no targets",
            bundle.segment_index
        )));
    }
    let payload: InfoRatingPayload = caller.call(
        schema::RATING_INFO,
        bundle_prompt(prompts::RATING_INFO, bundle),
        bundle_inputs(bundle),
    )?;
    let got: Vec<usize> = payload.ratings.iter().map(|r| r.index).collect();
    check_indices("rating index", &bundle.targets, &got)?;
    let by_index: BTreeMap<usize, u8> = payload
        .ratings
        .iter()
        .map(|r| (r.index, r.informativeness))
        .collect();
    bundle
        .targets
        .iter()
        .map(|&i| {
            Ok(record(
                bundle,
                source_id,
                i,
                Scores::info(Level::new(by_index[&i])?),
            ))
        })
        .collect()
}

/// One three-aspect record per target, in target order.
pub fn rate_segment_aspects(
    bundle: &ContextBundle,
    source_id: &str,
    caller: &Caller,
) -> Result<Vec<RatingRecord>> {
    if bundle.targets.is_empty() {
        return Err(Error::validation(format!(
            "segment {} has no targets",
            bundle.segment_index
        )));
    }
    let payload: MixRatingPayload = caller.call(
        schema::RATING_MIX,
        bundle_prompt(prompts::RATING_MIX, bundle),
        bundle_inputs(bundle),
    )?;
    let got: Vec<usize> = payload.ratings.iter().map(|r| r.index).collect();
    check_indices("rating index", &bundle.targets, &got)?;
    let by_index: BTreeMap<usize, _> = payload.ratings.iter().map(|r| (r.index, r)).collect();
    bundle
        .targets
        .iter()
        .map(|&i| {
            let r = by_index[&i];
            let scores = Scores::mix(
                Level::new(r.novelty)?,
                Level::new(r.relevance)?,
                Level::new(r.implication_scope)?,
            );
            Ok(record(bundle, source_id, i, scores))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimInput {
    pub id: u64,
    pub speaker: String,
    pub claim: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimRating {
    pub id: u64,
    pub informativeness: Level,
    pub novelty: Level,
    pub relevance: Level,
    pub implication_scope: Level,
}

/// Rates claims against the existing memories as the shared baseline. An
/// empty baseline is a cold start, not an error.
pub fn rate_claims(
    claims: &[ClaimInput],
    memories: &[String],
    topic: &str,
    caller: &Caller,
) -> Result<Vec<ClaimRating>> {
    if claims.is_empty() {
        return Err(Error::validation("no claims to rate"));
    }
    let memories_text = if memories.is_empty() {
        "(nothing yet)".to_string()
    } else {
        memories
            .iter()
            .map(|m| format!("- {m}"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let claims_text = claims
        .iter()
        .map(|c| format!("[{}] {}: {}", c.id, c.speaker, c.claim))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = prompts::render(
        prompts::CLAIM_RATING,
        &[
            ("rubric", prompts::RUBRIC.to_string()),
            ("topic", topic.into()),
            ("memories", memories_text),
            ("claims", claims_text),
        ],
    );
    let payload: ClaimRatingPayload = caller.call(
        schema::CLAIM_RATING,
        prompt,
        json!({"topic": topic, "memories": memories, "claims": claims}),
    )?;
    let want: Vec<u64> = claims.iter().map(|c| c.id).collect();
    let got: Vec<u64> = payload.ratings.iter().map(|r| r.id).collect();
    check_indices("claim id", &want, &got)?;
    let by_id: BTreeMap<u64, _> = payload.ratings.iter().map(|r| (r.id, r)).collect();
    want.iter()
        .map(|id| {
            let r = by_id[id];
            Ok(ClaimRating {
                id: *id,
                informativeness: Level::new(r.informativeness)?,
                novelty: Level::new(r.novelty)?,
                relevance: Level::new(r.relevance)?,
                implication_scope: Level::new(r.implication_scope)?,
            })
        })
        .collect()
}

pub const SOFTMAX_TAU: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimOp {
    Mean,
    Max,
    Top2Mean,
    TopQuartileMean,
    SoftmaxWeighted,
    Median,
}

impl ClaimOp {
    pub const ALL: [ClaimOp; 6] = [
        ClaimOp::Mean,
        ClaimOp::Max,
        ClaimOp::Top2Mean,
        ClaimOp::TopQuartileMean,
        ClaimOp::SoftmaxWeighted,
        ClaimOp::Median,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ClaimOp::Mean => "mean",
            ClaimOp::Max => "max",
            ClaimOp::Top2Mean => "top2_mean",
            ClaimOp::TopQuartileMean => "top_quartile_mean",
            ClaimOp::SoftmaxWeighted => "softmax_weighted",
            ClaimOp::Median => "median",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AspectOp {
    Min,
    Mean,
    Max,
    Softmax,
    ProductRoot,
}

impl AspectOp {
    pub const ALL: [AspectOp; 5] = [
        AspectOp::Min,
        AspectOp::Mean,
        AspectOp::Max,
        AspectOp::Softmax,
        AspectOp::ProductRoot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AspectOp::Min => "min",
            AspectOp::Mean => "mean",
            AspectOp::Max => "max",
            AspectOp::Softmax => "softmax",
            AspectOp::ProductRoot => "product_root",
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn top_mean(v: &[f64], k: usize) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    mean(&s[..k.clamp(1, s.len())])
}

/// Σ wᵢvᵢ with wᵢ ∝ exp(vᵢ/τ).
pub fn softmax_weighted(v: &[f64], tau: f64) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = v.iter().map(|x| ((x - m) / tau).exp()).collect();
    let z: f64 = w.iter().sum();
    v.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / z
}

pub fn aggregate_claims(scores: &[f64], op: ClaimOp) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::validation("cannot aggregate zero claims"));
    }
    Ok(match op {
        ClaimOp::Mean => mean(scores),
        ClaimOp::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ClaimOp::Top2Mean => top_mean(scores, 2),
        ClaimOp::TopQuartileMean => top_mean(scores, scores.len().div_ceil(4)),
        ClaimOp::SoftmaxWeighted => softmax_weighted(scores, SOFTMAX_TAU),
        ClaimOp::Median => {
            let mut s = scores.to_vec();
            s.sort_by(f64::total_cmp);
            let n = s.len();
            if n % 2 == 1 {
                s[n / 2]
            } else {
                (s[n / 2 - 1] + s[n / 2]) / 2.0
            }
        }
    })
}

pub fn combine_aspects(novelty: f64, relevance: f64, scope: f64, op: AspectOp) -> f64 {
    let v = [novelty, relevance, scope];
    match op {
        AspectOp::Min => v.iter().copied().fold(f64::INFINITY, f64::min),
        AspectOp::Mean => mean(&v),
        AspectOp::Max => v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        AspectOp::Softmax => softmax_weighted(&v, SOFTMAX_TAU),
        AspectOp::ProductRoot => (novelty * relevance * scope).cbrt(),
    }
}

/// Utterance-level CIG estimate from claim ratings.
pub fn estimate(claims: &[ClaimRating], claim_op: ClaimOp, aspect_op: AspectOp) -> Result<f64> {
    let agg = |f: fn(&ClaimRating) -> Level| {
        aggregate_claims(
            &claims.iter().map(|c| f(c).value()).collect::<Vec<_>>(),
            claim_op,
        )
    };
    Ok(combine_aspects(
        agg(|c| c.novelty)?,
        agg(|c| c.relevance)?,
        agg(|c| c.implication_scope)?,
        aspect_op,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UtteranceKey {
    pub episode_id: String,
    pub utterance_index: usize,
}

/// Human soft labels: the mean human CIG per utterance.
pub fn soft_labels(records: &[RatingRecord]) -> BTreeMap<UtteranceKey, f64> {
    let mut acc: BTreeMap<UtteranceKey, (f64, usize)> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.condition == RatingCondition::Human)
    {
        if let Some(c) = r.scores.cig {
            let e = acc.entry(r.utterance()).or_default();
            e.0 += c.value();
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub claim_op: ClaimOp,
    pub aspect_op: AspectOp,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Coverage {
    pub used: usize,
    pub zero_claims: Vec<UtteranceKey>,
    pub unlabeled: Vec<UtteranceKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationGrid {
    pub cells: Vec<GridCell>,
    pub coverage: Coverage,
}

impl AggregationGrid {
    pub fn mae(&self, claim_op: ClaimOp, aspect_op: AspectOp) -> f64 {
        self.cells
            .iter()
            .find(|c| c.claim_op == claim_op && c.aspect_op == aspect_op)
            .expect("grid is complete")
            .mae
    }

    /// The cell with the smallest MAE (first in grid order on ties).
    pub fn best(&self) -> &GridCell {
        self.cells
            .iter()
            .min_by(|a, b| a.mae.total_cmp(&b.mae))
            .expect("grid is non-empty")
    }

    /// Matrix form: one row per claim operator, one column per aspect operator.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("claim_op");
        for a in AspectOp::ALL {
            out.push(',');
            out.push_str(a.as_str());
        }
        out.push('\n');
        for c in ClaimOp::ALL {
            out.push_str(c.as_str());
            for a in AspectOp::ALL {
                out.push(',');
                out.push_str(&fmt_f(self.mae(c, a)));
            }
            out.push('\n');
        }
        out
    }
}

/// MAE of every (claim op, aspect op) estimate against human soft labels.
/// Utterances without claims or without a label are excluded and reported.
pub fn run_aggregation_grid(
    claims: &BTreeMap<UtteranceKey, Vec<ClaimRating>>,
    labels: &BTreeMap<UtteranceKey, f64>,
) -> Result<AggregationGrid> {
    let mut coverage = Coverage::default();
    let mut rows = Vec::new();
    for (key, label) in labels {
        match claims.get(key) {
            Some(c) if !c.is_empty() => rows.push((c, *label)),
            _ => coverage.zero_claims.push(key.clone()),
        }
    }
    coverage.unlabeled = claims
        .keys()
        .filter(|k| !labels.contains_key(*k))
        .cloned()
        .collect();
    coverage.used = rows.len();
    if rows.is_empty() {
        return Err(Error::validation(
            "no utterance has both claims and a human label",
        ));
    }
    let mut cells = Vec::with_capacity(ClaimOp::ALL.len() * AspectOp::ALL.len());
    for claim_op in ClaimOp::ALL {
        for aspect_op in AspectOp::ALL {
            let mut total = 0.0;
            for (c, label) in &rows {
                total += (estimate(c, claim_op, aspect_op)? - label).abs();
            }
            cells.push(GridCell {
                claim_op,
                aspect_op,
                mae: total / rows.len() as f64,
            });
        }
    }
    Ok(AggregationGrid { cells, coverage })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{ContextLine, PriorBlock};
    use crate::gateway::{CachePolicy, Gateway, GatewayConfig, Reply, ScriptedProvider};
    use crate::prompts::ModelRoute;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn bundle(n: usize) -> ContextBundle {
        ContextBundle {
            episode_id: "e".into(),
            segment_index: 2,
            topic: "Death penalty".into(),
            condition: ContextCondition::Full,
            prior: PriorBlock::Empty,
            window: vec![],
            segment: (0..n)
                .map(|i| ContextLine {
                    index: i,
                    speaker: "A".into(),
                    text: format!("turn {i}"),
                })
                .collect(),
            targets: (0..n).collect(),
            empty_memory: false,
        }
    }

    fn run<T>(
        schema: &str,
        reply: serde_json::Value,
        f: impl FnOnce(&Caller) -> Result<T>,
    ) -> Result<T> {
        let p = Arc::new(ScriptedProvider::new().on(schema, json!({}), vec![Reply::json(reply)]));
        let gw = Gateway::new(GatewayConfig {
            retries: 0,
            backoff: std::time::Duration::ZERO,
            max_in_flight: 1,
        })
        .with_chat("p", p);
        let route = ModelRoute::new("p", "m");
        f(&Caller {
            gateway: &gw,
            route: &route,
            policy: CachePolicy::Off,
            seed: 0,
        })
    }

    fn info_rows(levels: &[(usize, u8)]) -> serde_json::Value {
        json!({"ratings": levels.iter().map(|(i, l)| json!({"index": i, "informativeness": l, "context_type": "INFO"})).collect::<Vec<_>>()})
    }

    #[test]
    fn info_ratings_parse_and_reject() {
        let recs = run(
            "rating_info",
            info_rows(&[(0, 3), (1, 1), (2, 1), (3, 4)]),
            |c| rate_segment_info(&bundle(4), "gpt", c),
        )
        .unwrap();
        let levels: Vec<u8> = recs.iter().map(|r| r.scores.cig.unwrap().get()).collect();
        assert_eq!(levels, [3, 1, 1, 4]);
        assert!(recs.iter().all(|r| r.variant() == RatingVariant::Info));

        let err = run(
            "rating_info",
            info_rows(&[(0, 5), (1, 1), (2, 1), (3, 4)]),
            |c| rate_segment_info(&bundle(4), "gpt", c),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SchemaInvalid { .. }));

        let err = run("rating_info", info_rows(&[(0, 3), (1, 1), (3, 4)]), |c| {
            rate_segment_info(&bundle(4), "gpt", c)
        })
        .unwrap_err();
        assert!(err.to_string().contains("missing [2]"), "{err}");
    }

    #[test]
    fn aspect_ratings_parse_and_reject() {
        let rows = json!({"ratings": [
            {"index": 0, "novelty": 4, "relevance": 4, "implication_scope": 3, "context_type": "MIX"},
            {"index": 1, "novelty": 2, "relevance": 3, "implication_scope": 1, "context_type": "MIX"},
            {"index": 2, "novelty": 1, "relevance": 2, "implication_scope": 1, "context_type": "MIX"},
            {"index": 3, "novelty": 3, "relevance": 4, "implication_scope": 4, "context_type": "MIX"}
        ]});
        let recs = run("rating_mix", rows, |c| {
            rate_segment_aspects(&bundle(4), "gpt", c)
        })
        .unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[3].scores, Scores::mix(Level(3), Level(4), Level(4)));

        let missing = json!({"ratings": [{"index": 0, "novelty": 4, "implication_scope": 3}]});
        assert!(matches!(
            run("rating_mix", missing, |c| rate_segment_aspects(
                &bundle(1),
                "gpt",
                c
            )),
            Err(Error::SchemaInvalid { .. })
        ));

        let dup = json!({"ratings": [
            {"index": 0, "novelty": 4, "relevance": 4, "implication_scope": 3},
            {"index": 0, "novelty": 4, "relevance": 4, "implication_scope": 3}
        ]});
        let err = run("rating_mix", dup, |c| {
            rate_segment_aspects(&bundle(2), "gpt", c)
        })
        .unwrap_err();
        assert!(
            err.to_string().contains("duplicate [0]") && err.to_string().contains("missing [1]"),
            "{err}"
        );
    }

    #[test]
    fn claim_ratings_parse_verbatim() {
        let claims = [
            ClaimInput {
                id: 13,
                speaker: "A".into(),
                claim: "Executions cost more than life sentences.".into(),
            },
            ClaimInput {
                id: 14,
                speaker: "A".into(),
                claim: "Appeals take decades.".into(),
            },
        ];
        let rows = json!({"ratings": [
            {"id": 13, "informativeness": 4, "novelty": 4, "relevance": 4, "implication_scope": 4},
            {"id": 14, "informativeness": 3, "novelty": 3, "relevance": 4, "implication_scope": 4}
        ]});
        let got = run("claim_rating", rows.clone(), |c| {
            rate_claims(&claims, &[], "Death penalty", c)
        })
        .unwrap();
        assert_eq!(
            got[1],
            ClaimRating {
                id: 14,
                informativeness: Level(3),
                novelty: Level(3),
                relevance: Level(4),
                implication_scope: Level(4)
            }
        );

        let err = run("claim_rating", rows, |c| {
            rate_claims(&claims[..1], &[], "Death penalty", c)
        })
        .unwrap_err();
        assert!(err.to_string().contains("extra [14]"), "{err}");
    }

    #[test]
    fn records_round_trip_byte_identical() {
        let recs = vec![
            RatingRecord {
                episode_id: "e".into(),
                segment_index: 0,
                utterance_index: 3,
                source_id: "ann1".into(),
                condition: RatingCondition::Human,
                scores: Scores::info(Level(2)),
            },
            RatingRecord {
                episode_id: "e".into(),
                segment_index: 0,
                utterance_index: 3,
                source_id: "gpt#0".into(),
                condition: RatingCondition::Model(ContextCondition::MemorySummary),
                scores: Scores::mix(Level(1), Level(4), Level(2)),
            },
        ];
        let text = records_to_jsonl(&recs);
        let back = parse_records(&text).unwrap();
        assert_eq!(back, recs);
        assert_eq!(records_to_jsonl(&back), text);
        assert!(text.contains("\"condition\":\"memory_summary\""));

        let bad_level = text.replace("\"cig\":2", "\"cig\":0");
        assert!(parse_records(&bad_level).is_err());
        let partial = text.replace(",\"relevance\":4", "");
        assert!(parse_records(&partial).is_err());
        let dup = format!("{text}{}", text.lines().next().unwrap());
        assert!(parse_records(&dup).is_err());
    }

    #[test]
    fn operator_examples() {
        assert_eq!(
            aggregate_claims(&[4.0, 1.0, 3.0], ClaimOp::Top2Mean).unwrap(),
            3.5
        );
        assert_eq!(
            aggregate_claims(&[1.0, 2.0, 3.0, 4.0, 4.0], ClaimOp::TopQuartileMean).unwrap(),
            4.0
        );
        assert_eq!(
            aggregate_claims(&[1.0, 2.0, 3.0, 4.0], ClaimOp::Median).unwrap(),
            2.5
        );
        assert_eq!(aggregate_claims(&[2.0; 3], ClaimOp::Max).unwrap(), 2.0);
        assert_eq!(aggregate_claims(&[2.0; 3], ClaimOp::Mean).unwrap(), 2.0);
        assert!(aggregate_claims(&[], ClaimOp::Mean).is_err());
        // softmax over [1, 3]: weights e^1, e^3 → (e + 3e³)/(e + e³)
        let e = std::f64::consts::E;
        let want = (e + 3.0 * e.powi(3)) / (e + e.powi(3));
        assert!(
            (aggregate_claims(&[1.0, 3.0], ClaimOp::SoftmaxWeighted).unwrap() - want).abs() < 1e-12
        );
        assert_eq!(combine_aspects(2.5, 3.0, 3.0, AspectOp::Min), 2.5);
        assert!((combine_aspects(1.0, 2.0, 4.0, AspectOp::ProductRoot) - 2.0).abs() < 1e-12);
    }

    fn claim(id: u64, n: u8, r: u8, s: u8) -> ClaimRating {
        ClaimRating {
            id,
            informativeness: Level(1),
            novelty: Level(n),
            relevance: Level(r),
            implication_scope: Level(s),
        }
    }

    fn key(i: usize) -> UtteranceKey {
        UtteranceKey {
            episode_id: "e".into(),
            utterance_index: i,
        }
    }

    #[test]
    fn grid_recovers_the_generating_cell() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut claims = BTreeMap::new();
        let mut labels = BTreeMap::new();
        for i in 0..60 {
            let n = rng.random_range(1..=7);
            let cs: Vec<ClaimRating> = (0..n)
                .map(|j| {
                    claim(
                        j,
                        rng.random_range(1..=4),
                        rng.random_range(1..=4),
                        rng.random_range(1..=4),
                    )
                })
                .collect();
            // independent oracle: sort each aspect descending and average its top two
            let top2 = |f: fn(&ClaimRating) -> Level| {
                let mut v: Vec<u8> = cs.iter().map(|c| f(c).get()).collect();
                v.sort_unstable_by(|a, b| b.cmp(a));
                f64::from(v[0] + v[v.len().min(2) - 1]) / 2.0
            };
            let label = top2(|c| c.novelty)
                .min(top2(|c| c.relevance))
                .min(top2(|c| c.implication_scope));
            claims.insert(key(i), cs);
            labels.insert(key(i), label);
        }
        claims.insert(key(100), vec![claim(0, 1, 1, 1)]);
        labels.insert(key(101), 2.0);
        let grid = run_aggregation_grid(&claims, &labels).unwrap();
        assert_eq!(grid.cells.len(), 30);
        assert_eq!(grid.mae(ClaimOp::Top2Mean, AspectOp::Min), 0.0);
        for c in &grid.cells {
            if (c.claim_op, c.aspect_op) != (ClaimOp::Top2Mean, AspectOp::Min) {
                assert!(c.mae > 0.0, "{c:?}");
            }
        }
        assert_eq!(
            (grid.best().claim_op, grid.best().aspect_op),
            (ClaimOp::Top2Mean, AspectOp::Min)
        );
        assert_eq!(grid.coverage.used, 60);
        assert_eq!(grid.coverage.zero_claims, [key(101)]);
        assert_eq!(grid.coverage.unlabeled, [key(100)]);
        assert_eq!(grid.to_csv().lines().count(), 7);
    }

    #[test]
    fn grid_translation_and_constants() {
        let claims: BTreeMap<_, _> = (0..5)
            .map(|i| (key(i), vec![claim(0, 3, 3, 3), claim(1, 3, 3, 3)]))
            .collect();
        let same: BTreeMap<_, _> = (0..5).map(|i| (key(i), 3.0)).collect();
        let shifted: BTreeMap<_, _> = (0..5).map(|i| (key(i), 4.0)).collect();
        let g0 = run_aggregation_grid(&claims, &same).unwrap();
        let g1 = run_aggregation_grid(&claims, &shifted).unwrap();
        for (a, b) in g0.cells.iter().zip(&g1.cells) {
            assert!(a.mae.abs() < 1e-12 && (b.mae - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_labels_average_humans_only() {
        let mk = |src: &str, cond, l| RatingRecord {
            episode_id: "e".into(),
            segment_index: 0,
            utterance_index: 1,
            source_id: src.into(),
            condition: cond,
            scores: Scores::info(Level(l)),
        };
        let recs = [
            mk("a", RatingCondition::Human, 2),
            mk("b", RatingCondition::Human, 3),
            mk("m", RatingCondition::Model(ContextCondition::Full), 4),
        ];
        assert_eq!(soft_labels(&recs)[&key(1)], 2.5);
    }

    proptest! {
        #[test]
        fn aspect_ops_are_ordered(n in 1.0f64..4.0, r in 1.0f64..4.0, s in 1.0f64..4.0) {
            let lo = combine_aspects(n, r, s, AspectOp::Min);
            let mid = combine_aspects(n, r, s, AspectOp::Mean);
            let hi = combine_aspects(n, r, s, AspectOp::Max);
            prop_assert!(lo <= mid + 1e-12 && mid <= hi + 1e-12);
            for op in [AspectOp::Softmax, AspectOp::ProductRoot] {
                let v = combine_aspects(n, r, s, op);
                prop_assert!(lo - 1e-12 <= v && v <= hi + 1e-12);
            }
            prop_assert!((softmax_weighted(&[n, r, s], 1e9) - mid).abs() < 1e-6);
        }

        #[test]
        fn claim_ops_stay_within_range(v in prop::collection::vec(1.0f64..=4.0, 1..20)) {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for op in ClaimOp::ALL {
                let x = aggregate_claims(&v, op).unwrap();
                prop_assert!(lo - 1e-12 <= x && x <= hi + 1e-12);
                prop_assert_eq!(aggregate_claims(&[v[0]], op).unwrap(), v[0]);
            }
        }
    }
}
