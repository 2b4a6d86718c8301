//! Stage bodies. Each returns the artifacts it produced; the runner writes
//! them and records their digests.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{analysis, sha256_hex, to_json, Artifacts, Pipeline};
use crate::annotation::{segment_task, SessionSpec, TaskVariant};
use crate::context::{build_context, ContextBundle, ContextCondition};
use crate::error::{Error, Result};
use crate::memory::{consolidate_episode, EpisodeMemory};
use crate::prompts::{Caller, ModelRoute};
use crate::proxies::{
    compute_episode_features, features_to_csv, AspectPredictions, ProxyFeatureVector,
};
use crate::rating::{
    parse_records, rate_claims, rate_segment_aspects, rate_segment_info, records_to_jsonl,
    ClaimInput, ClaimRating, Dimension, Level, RatingCondition, RatingRecord,
};
use crate::segmentation::{segment_episode, select_annotation_segments, SegmentationResult};
use crate::stats::round_label;
use crate::transcript::{
    apply_skip_rules, descriptive_stats, load_episode, parse_episode, write_episode, Episode,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentArtifact {
    pub result: SegmentationResult,
    /// Segment indices chosen for human annotation, chronological.
    pub annotation_segments: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimRatingRow {
    pub episode_id: String,
    pub utterance_index: usize,
    pub ratings: Vec<ClaimRating>,
}

pub const MODEL_RATINGS: &str = "rate/model.jsonl";
pub const HUMAN_RATINGS: &str = "rate/human.jsonl";
pub const CLAIM_RATINGS: &str = "rate/claims.json";
pub const FEATURES_JSON: &str = "features/features.json";
pub const FEATURES_CSV: &str = "features/features.csv";
pub const STATS_JSON: &str = "stats/stats.json";

/// Source id of model repeat `r`.
pub fn model_source(r: usize) -> String {
    format!("model-r{r}")
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.')
}

/// Maps `f` over `items` on scoped threads, keeping input order.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = items.iter().map(|it| s.spawn(|| f(it))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("stage worker panicked"))
            .collect()
    })
}

impl Pipeline {
    fn caller<'a>(&'a self, route: &'a ModelRoute, seed: u64) -> Caller<'a> {
        Caller {
            gateway: &self.gateway,
            route,
            policy: self.policy,
            seed,
        }
    }

    fn episode_ids(&self) -> Result<Vec<String>> {
        let manifest = super::Manifest::load(&self.out)?.ok_or_else(|| Error::MissingStage {
            stage: "preprocess".into(),
            needed_by: "pipeline".into(),
        })?;
        let entry = manifest
            .stages
            .get(&super::Stage::Preprocess)
            .ok_or_else(|| Error::MissingStage {
                stage: "preprocess".into(),
                needed_by: "pipeline".into(),
            })?;
        Ok(entry
            .outputs
            .keys()
            .filter_map(|p| {
                p.strip_prefix("preprocess/")?
                    .strip_suffix(".jsonl")
                    .map(str::to_string)
            })
            .collect())
    }

    fn episodes(&self) -> Result<Vec<Episode>> {
        self.episode_ids()?
            .iter()
            .map(|id| parse_episode(&self.read(&format!("preprocess/{id}.jsonl"))?))
            .collect()
    }

    fn segments_of(&self, id: &str) -> Result<SegmentArtifact> {
        self.read_json(&format!("segment/{id}.json"))
    }

    fn memory_of(&self, id: &str) -> Result<EpisodeMemory> {
        self.read_json(&format!("consolidate/{id}.json"))
    }

    fn bundles_of(&self, id: &str) -> Result<Vec<ContextBundle>> {
        self.read_json(&format!("summarise/{id}.json"))
    }
}

pub(super) fn preprocess(p: &Pipeline) -> Result<(BTreeMap<String, String>, Artifacts)> {
    let mut inputs = BTreeMap::new();
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for rel in &p.cfg.config.inputs.episodes {
        let path = p.cfg.resolve(rel);
        let raw = std::fs::read(&path)
            .map_err(|e| Error::config(format!("cannot read episode {}: {e}", path.display())))?;
        inputs.insert(rel.display().to_string(), sha256_hex(&raw));
        let episode = apply_skip_rules(&load_episode(&path)?);
        if !valid_id(&episode.id) {
            return Err(Error::validation(format!(
                "episode id `{}` is not usable as a file name",
                episode.id
            )));
        }
        if !seen.insert(episode.id.clone()) {
            return Err(Error::validation(format!(
                "episode id `{}` appears twice",
                episode.id
            )));
        }
        out.push((
            format!("preprocess/{}.jsonl", episode.id),
            write_episode(&episode).into_bytes(),
        ));
    }
    for rel in [
        &p.cfg.config.inputs.human_ratings,
        &p.cfg.config.inputs.logprobs,
    ]
    .into_iter()
    .flatten()
    {
        let raw = std::fs::read(p.cfg.resolve(rel))
            .map_err(|e| Error::config(format!("cannot read {}: {e}", rel.display())))?;
        inputs.insert(rel.display().to_string(), sha256_hex(&raw));
    }
    Ok((inputs, out))
}

pub(super) fn segment(p: &Pipeline) -> Result<Artifacts> {
    let cfg = &p.cfg.config;
    let mut out = Vec::new();
    for ep in p.episodes()? {
        let result = segment_episode(
            &ep,
            &cfg.segmentation,
            &p.gateway,
            &cfg.routes.segmentation,
            p.policy,
            cfg.seed,
        )?;
        let k = cfg
            .selection
            .segments_per_session
            .min(result.segments.len());
        let mut chosen: Vec<usize> = select_annotation_segments(
            &ep,
            &result.segments,
            k,
            &BTreeMap::new(),
            &cfg.selection.params,
        )?
        .into_iter()
        .map(|s| s.segment_index)
        .collect();
        chosen.sort_unstable();
        let stats = descriptive_stats(&ep, &result.segments);
        out.push((
            format!("segment/{}.stats.csv", ep.id),
            stats.to_csv().into_bytes(),
        ));
        let art = SegmentArtifact {
            result,
            annotation_segments: chosen,
        };
        out.push((
            format!("segment/{}.json", ep.id),
            to_json(&art).into_bytes(),
        ));
    }
    Ok(out)
}

pub(super) fn consolidate(p: &Pipeline) -> Result<Artifacts> {
    let cfg = &p.cfg.config;
    let episodes = p.episodes()?;
    let memories = par_map(&episodes, |ep| {
        consolidate_episode(ep, &cfg.memory, &p.caller(&cfg.routes.memory, cfg.seed))
    })?;
    Ok(episodes
        .iter()
        .zip(memories)
        .map(|(ep, m)| {
            (
                format!("consolidate/{}.json", ep.id),
                to_json(&m).into_bytes(),
            )
        })
        .collect())
}

pub(super) fn summarise(p: &Pipeline) -> Result<Artifacts> {
    let cfg = &p.cfg.config;
    let episodes = p.episodes()?;
    let bundles = par_map(&episodes, |ep| {
        let segs = p.segments_of(&ep.id)?;
        let memory = p.memory_of(&ep.id)?;
        let caller = p.caller(&cfg.routes.summary, cfg.seed);
        let mut out = Vec::new();
        for seg in &segs.result.segments {
            let store = memory
                .store
                .as_of(seg.interval.start, |t| p.gateway.embed_one(t))?;
            for &c in &cfg.conditions {
                out.push(build_context(
                    ep,
                    seg,
                    Some(&store),
                    c,
                    &cfg.context,
                    &caller,
                )?);
            }
        }
        Ok(out)
    })?;
    Ok(episodes
        .iter()
        .zip(bundles)
        .map(|(ep, b)| {
            (
                format!("summarise/{}.json", ep.id),
                to_json(&b).into_bytes(),
            )
        })
        .collect())
}

fn validate_human(
    records: &[RatingRecord],
    episodes: &[Episode],
    segs: &BTreeMap<String, SegmentArtifact>,
) -> Result<()> {
    for r in records {
        if r.condition != RatingCondition::Human {
            return Err(Error::validation(format!(
                "human rating file holds a {} record",
                r.condition
            )));
        }
        let ep = episodes
            .iter()
            .find(|e| e.id == r.episode_id)
            .ok_or_else(|| {
                Error::validation(format!(
                    "human rating for unknown episode `{}`",
                    r.episode_id
                ))
            })?;
        let u = ep.utterances.get(r.utterance_index).ok_or_else(|| {
            Error::validation(format!(
                "human rating for {}#{} outside the episode",
                r.episode_id, r.utterance_index
            ))
        })?;
        if u.skipped {
            return Err(Error::validation(format!(
                "human rating for skipped utterance {}#{}",
                r.episode_id, r.utterance_index
            )));
        }
        let seg = segs[&r.episode_id]
            .result
            .segments
            .iter()
            .find(|s| s.interval.contains(r.utterance_index));
        if seg.map(|s| s.segment_index) != Some(r.segment_index) {
            return Err(Error::validation(format!(
                "human rating for {}#{} names segment {}, which does not contain it",
                r.episode_id, r.utterance_index, r.segment_index
            )));
        }
    }
    Ok(())
}

pub(super) fn rate(p: &Pipeline) -> Result<Artifacts> {
    let cfg = &p.cfg.config;
    let episodes = p.episodes()?;
    let segs: BTreeMap<String, SegmentArtifact> = episodes
        .iter()
        .map(|e| Ok((e.id.clone(), p.segments_of(&e.id)?)))
        .collect::<Result<_>>()?;

    let per_episode =
        par_map(&episodes, |ep| {
            let mut records = Vec::new();
            for bundle in p.bundles_of(&ep.id)? {
                for r in 0..cfg.repeats {
                    let caller = p.caller(&cfg.routes.rating, cfg.seed + r as u64);
                    records.extend(rate_segment_info(&bundle, &model_source(r), &caller)?);
                    records.extend(rate_segment_aspects(&bundle, &model_source(r), &caller)?);
                }
            }
            let memory = p.memory_of(&ep.id)?;
            let wanted: BTreeSet<usize> = segs[&ep.id]
                .result
                .segments
                .iter()
                .filter(|s| segs[&ep.id].annotation_segments.contains(&s.segment_index))
                .flat_map(|s| s.interval.range())
                .collect();
            let caller = p.caller(&cfg.routes.claim_rating, cfg.seed);
            let mut claims = Vec::new();
            for rec in memory.records.iter().filter(|r| {
                !r.skipped && !r.claims.is_empty() && wanted.contains(&r.utterance_index)
            }) {
                let before = memory
                    .store
                    .as_of(rec.utterance_index, |t| p.gateway.embed_one(t))?;
                let memories: Vec<String> = before.items().map(|m| m.claim_text.clone()).collect();
                let inputs: Vec<ClaimInput> = rec
                    .claims
                    .iter()
                    .enumerate()
                    .map(|(k, c)| ClaimInput {
                        id: k as u64 + 1,
                        speaker: c.speaker_name.clone(),
                        claim: c.claim_text.clone(),
                    })
                    .collect();
                let ratings = rate_claims(&inputs, &memories, &ep.topic, &caller)?;
                claims.push(ClaimRatingRow {
                    episode_id: ep.id.clone(),
                    utterance_index: rec.utterance_index,
                    ratings,
                });
            }
            Ok((records, claims))
        })?;
    let mut model = Vec::new();
    let mut claims = Vec::new();
    for (r, c) in per_episode {
        model.extend(r);
        claims.extend(c);
    }
    model.sort_by_key(|r| r.key());

    let mut human = match &cfg.inputs.human_ratings {
        Some(rel) => parse_records(&std::fs::read_to_string(p.cfg.resolve(rel))?)?,
        None => vec![],
    };
    validate_human(&human, &episodes, &segs)?;
    human.sort_by_key(|r| r.key());
    Ok(vec![
        (MODEL_RATINGS.into(), records_to_jsonl(&model).into_bytes()),
        (HUMAN_RATINGS.into(), records_to_jsonl(&human).into_bytes()),
        (CLAIM_RATINGS.into(), to_json(&claims).into_bytes()),
    ])
}

/// Gating levels: the memory_summary model ratings averaged over repeats and
/// rounded half up.
pub fn gating_predictions(model: &[RatingRecord]) -> BTreeMap<(String, usize), AspectPredictions> {
    let mut acc: BTreeMap<(String, usize), BTreeMap<Dimension, Vec<f64>>> = BTreeMap::new();
    for r in model
        .iter()
        .filter(|r| r.condition == RatingCondition::Model(ContextCondition::MemorySummary))
    {
        let slot = acc
            .entry((r.episode_id.clone(), r.utterance_index))
            .or_default();
        for d in Dimension::ALL {
            if let Some(l) = r.scores.get(d) {
                slot.entry(d).or_default().push(l.value());
            }
        }
    }
    acc.into_iter()
        .map(|(k, dims)| {
            let level = |d: Dimension| {
                dims.get(&d).map(|v| {
                    Level::new(round_label(v.iter().sum::<f64>() / v.len() as f64))
                        .expect("rounded into range")
                })
            };
            let p = AspectPredictions {
                info: level(Dimension::Cig),
                novo: level(Dimension::Novelty),
                relv: level(Dimension::Relevance),
                imsc: level(Dimension::ImplicationScope),
            };
            (k, p)
        })
        .collect()
}

pub(super) fn features(p: &Pipeline) -> Result<Artifacts> {
    let model = parse_records(&p.read(MODEL_RATINGS)?)?;
    let gating = gating_predictions(&model);
    let mut rows: Vec<ProxyFeatureVector> = Vec::new();
    for ep in p.episodes()? {
        let memory = p.memory_of(&ep.id)?;
        let mut traces = BTreeMap::new();
        for u in &ep.utterances {
            if let Some(t) = p.gateway.logprobs(&ep.id, u.index, &u.text)? {
                traces.insert(
                    u.index,
                    t.into_iter().map(|x| x.logprob).collect::<Vec<f64>>(),
                );
            }
        }
        let predictions: BTreeMap<usize, AspectPredictions> = gating
            .iter()
            .filter(|((e, _), _)| *e == ep.id)
            .map(|((_, i), v)| (*i, *v))
            .collect();
        rows.extend(compute_episode_features(
            &ep,
            &p.analyzer,
            &traces,
            &memory.records,
            &predictions,
        )?);
    }
    Ok(vec![
        (FEATURES_CSV.into(), features_to_csv(&rows).into_bytes()),
        (FEATURES_JSON.into(), to_json(&rows).into_bytes()),
    ])
}

pub(super) fn stats(p: &Pipeline) -> Result<Artifacts> {
    let episodes = p.episodes()?;
    let input = analysis::StatsInput {
        episodes: &episodes,
        model: &parse_records(&p.read(MODEL_RATINGS)?)?,
        human: &parse_records(&p.read(HUMAN_RATINGS)?)?,
        claims: &p.read_json::<Vec<ClaimRatingRow>>(CLAIM_RATINGS)?,
        features: &p.read_json::<Vec<ProxyFeatureVector>>(FEATURES_JSON)?,
        conditions: &p.cfg.config.conditions,
        max_lag: p.cfg.config.stats.max_lag,
        ordinal: p.cfg.config.stats.ordinal,
    };
    let stats = analysis::compute(&input)?;
    Ok(vec![(STATS_JSON.into(), to_json(&stats).into_bytes())])
}

pub(super) fn report(p: &Pipeline) -> Result<Artifacts> {
    let stats: analysis::StatsBundle = p.read_json(STATS_JSON)?;
    Ok(analysis::render(&stats)
        .into_iter()
        .map(|(name, body)| (format!("report/{name}"), body.into_bytes()))
        .collect())
}

pub(super) fn annotation_sessions(p: &Pipeline) -> Result<Vec<SessionSpec>> {
    if !p
        .cfg
        .config
        .conditions
        .contains(&ContextCondition::MemorySummary)
    {
        return Err(Error::config(
            "annotation sessions need the memory_summary condition",
        ));
    }
    let annotators: Vec<String> = p
        .cfg
        .config
        .annotation
        .tokens
        .values()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut out = Vec::new();
    for ep in p.episodes()? {
        let segs = p.segments_of(&ep.id)?;
        let bundles = p.bundles_of(&ep.id)?;
        let mut tasks = Vec::new();
        for &k in &segs.annotation_segments {
            let b = bundles
                .iter()
                .find(|b| b.segment_index == k && b.condition == ContextCondition::MemorySummary)
                .ok_or_else(|| {
                    Error::validation(format!(
                        "no memory_summary context for {} segment {k}",
                        ep.id
                    ))
                })?;
            tasks.push(segment_task(&ep, b.clone(), &p.analyzer)?);
        }
        for (variant, suffix) in [
            (TaskVariant::InfoOnly, "info"),
            (TaskVariant::ThreeAspects, "aspects"),
        ] {
            out.push(SessionSpec {
                session_id: format!("{}-{suffix}", ep.id),
                variant,
                annotators: annotators.clone(),
                segments: tasks.clone(),
            });
        }
    }
    Ok(out)
}
