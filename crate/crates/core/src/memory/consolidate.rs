//! Extraction and consolidation: claims → retrieval → bidirectional judgment
//! → target selection → action → store update.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::policy::{decide_action, map_relation, select_target, Action, Candidate};
use super::{Claim, Degraded, MemoryItem, MemoryStore, MemoryUpdate, Relation, TargetRef};
use crate::error::{Error, Result};
use crate::gateway::schema::{self, ClaimExtractionPayload, MergePayload, NliLabel, NliPayload};
use crate::prompts::{self, Caller};
use crate::transcript::Episode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    /// Candidates retrieved per claim.
    pub k: usize,
    /// Candidates below this cosine similarity are not judged.
    pub similarity_floor: f64,
    pub max_claims: usize,
    /// Preceding turns shown to the extractor for reference resolution.
    pub context_turns: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            k: 5,
            similarity_floor: 0.0,
            max_claims: 30,
            context_turns: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub claims: Vec<Claim>,
    pub failed: bool,
    /// Claims dropped by the per-utterance cap.
    pub truncated: usize,
}

fn recoverable(e: &Error) -> bool {
    matches!(e, Error::SchemaInvalid { .. } | Error::Provider { .. })
}

/// Claims of one utterance. Failures after retries yield zero claims with the
/// failure flag set rather than an error.
pub fn extract_claims(
    episode: &Episode,
    index: usize,
    config: &MemoryConfig,
    ctx: &Caller,
) -> Result<Extraction> {
    let utt = &episode.utterances[index];
    let speaker = episode.speaker_of(utt);
    let context: Vec<_> = episode.utterances[index.saturating_sub(config.context_turns)..index]
        .iter()
        .map(|u| json!({"index": u.index, "speaker": episode.speaker_of(u).display_name, "text": u.text}))
        .collect();
    let context_text = episode.utterances[index.saturating_sub(config.context_turns)..index]
        .iter()
        .map(|u| {
            format!(
                "[{}] {}: {}",
                u.index,
                episode.speaker_of(u).display_name,
                u.text
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = prompts::render(
        prompts::CLAIM_EXTRACTION,
        &[
            (
                "context",
                if context_text.is_empty() {
                    "(none)".into()
                } else {
                    context_text
                },
            ),
            ("turn_id", index.to_string()),
            ("speaker", speaker.display_name.clone()),
            ("utterance", utt.text.clone()),
        ],
    );
    let inputs = json!({"speaker": speaker.display_name, "turn_id": index, "utterance": utt.text, "context": context});
    let payload: ClaimExtractionPayload = match ctx.call(schema::CLAIM_EXTRACTION, prompt, inputs) {
        Ok(p) => p,
        Err(e) if recoverable(&e) => {
            tracing::warn!(episode = %episode.id, index, error = %e, "claim extraction failed");
            return Ok(Extraction {
                claims: vec![],
                failed: true,
                truncated: 0,
            });
        }
        Err(e) => return Err(e),
    };
    let mut claims: Vec<Claim> = payload
        .memories
        .into_iter()
        .filter(|m| {
            let ok = m.turn_id.as_index() == Some(index);
            if !ok {
                tracing::warn!(episode = %episode.id, index, turn = ?m.turn_id, "dropping claim attributed to another turn");
            }
            ok
        })
        .map(|m| Claim {
            speaker_id: utt.speaker_id.clone(),
            speaker_name: speaker.display_name.clone(),
            target_speaker: if m.target_speaker.trim().is_empty() { "Everyone".into() } else { m.target_speaker },
            claim_text: m.claim.trim().to_string(),
            turn_id: index,
        })
        .collect();
    let mut truncated = 0;
    if claims.len() > config.max_claims {
        truncated = claims.len() - config.max_claims;
        tracing::warn!(episode = %episode.id, index, extracted = claims.len(), cap = config.max_claims, "truncating claims");
        claims.truncate(config.max_claims);
    }
    Ok(Extraction {
        claims,
        failed: false,
        truncated,
    })
}

pub fn retrieve_candidates<'s>(
    query: &[f64],
    store: &'s MemoryStore,
    k: usize,
) -> Vec<(&'s MemoryItem, f64)> {
    store.nearest(query, k)
}

fn nli(premise: &str, hypothesis: &str, ctx: &Caller) -> Result<NliLabel> {
    let prompt = prompts::render(
        prompts::NLI_JUDGMENT,
        &[
            ("premise", premise.into()),
            ("hypothesis", hypothesis.into()),
        ],
    );
    Ok(ctx
        .call::<NliPayload>(
            schema::NLI_JUDGMENT,
            prompt,
            json!({"premise": premise, "hypothesis": hypothesis}),
        )?
        .label)
}

/// Judges A ⇒ B and B ⇒ A and maps the pair to one relation. A failed
/// judgment degrades to neutral with the flag set.
pub fn classify_relation(a: &str, b: &str, ctx: &Caller) -> Result<(Relation, bool)> {
    let forward = nli(a, b, ctx);
    let backward = nli(b, a, ctx);
    match (forward, backward) {
        (Ok(f), Ok(bk)) => Ok((map_relation(f, bk), false)),
        (Err(e), _) | (_, Err(e)) if recoverable(&e) => {
            tracing::warn!(error = %e, "relation judgment failed; treating as neutral");
            Ok((Relation::Neutral, true))
        }
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

fn merge_text(new: &str, existing: &str, ctx: &Caller) -> Result<Option<String>> {
    let prompt = prompts::render(
        prompts::CLAIM_MERGE,
        &[
            ("new_claim", new.into()),
            ("existing_claim", existing.into()),
        ],
    );
    match ctx.call::<MergePayload>(
        schema::CLAIM_MERGE,
        prompt,
        json!({"new_claim": new, "existing_claim": existing}),
    ) {
        Ok(p) => Ok(Some(p.claim)),
        Err(e) if recoverable(&e) => {
            tracing::warn!(error = %e, "merge failed; replacing with the new claim");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Runs one claim through retrieval, judgment, policy and store update.
pub fn consolidate_claim(
    claim: &Claim,
    store: &mut MemoryStore,
    config: &MemoryConfig,
    ctx: &Caller,
) -> Result<MemoryUpdate> {
    let query = ctx.embed(&claim.claim_text)?;
    let retrieved: Vec<(MemoryItem, f64)> = retrieve_candidates(&query, store, config.k)
        .into_iter()
        .filter(|(_, s)| *s >= config.similarity_floor)
        .map(|(it, s)| (it.clone(), s))
        .collect();

    let mut candidates = Vec::with_capacity(retrieved.len());
    let mut nli_degraded = false;
    for (item, sim) in &retrieved {
        let (relation, degraded) = classify_relation(&claim.claim_text, &item.claim_text, ctx)?;
        nli_degraded |= degraded;
        candidates.push(Candidate {
            id: item.id,
            same_speaker: item.speaker_id == claim.speaker_id,
            similarity: *sim,
            relation,
        });
    }
    let selected = select_target(&candidates).cloned();
    let (action, relation) = decide_action(selected.as_ref().map(|c| (c.same_speaker, c.relation)));
    let target = selected.as_ref().map(|c| {
        let item = retrieved
            .iter()
            .find(|(it, _)| it.id == c.id)
            .map(|(it, _)| it)
            .expect("selected from retrieved");
        TargetRef {
            id: item.id,
            speaker_id: item.speaker_id.clone(),
            claim_text: item.claim_text.clone(),
            similarity: c.similarity,
        }
    });

    let mut degraded = Degraded {
        nli: nli_degraded,
        merge: false,
    };
    let resulting_text = match action {
        Action::None => None,
        Action::Add => Some(claim.claim_text.clone()),
        Action::Update if relation == Relation::ForwardEntail => {
            let existing = &target.as_ref().expect("UPDATE has a target").claim_text;
            match merge_text(&claim.claim_text, existing, ctx)? {
                Some(t) => Some(t),
                None => {
                    degraded.merge = true;
                    Some(claim.claim_text.clone())
                }
            }
        }
        Action::Update => Some(claim.claim_text.clone()),
    };
    let embedding = match &resulting_text {
        Some(t) if *t == claim.claim_text => Some(query),
        Some(t) => Some(ctx.embed(t)?),
        None => None,
    };
    let update = MemoryUpdate {
        action,
        logical_relation: relation,
        source: claim.clone(),
        target,
        resulting_text,
        new_id: (action != Action::None).then(|| store.fresh_id()),
        degraded,
    };
    store.apply_resolved(update.clone(), embedding)?;
    Ok(update)
}

/// Per-utterance outcome, the input to the memory-dynamics features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationRecord {
    pub utterance_index: usize,
    pub skipped: bool,
    pub claims: Vec<Claim>,
    pub actions: Vec<Action>,
    pub extraction_failed: bool,
    pub truncated: usize,
}

impl ConsolidationRecord {
    pub fn claim_count(&self) -> usize {
        self.claims.len()
    }

    pub fn mem_delta(&self) -> usize {
        self.actions.iter().filter(|a| **a != Action::None).count()
    }
}

/// Consolidates one utterance against the progressively updated store. Claims
/// are processed in extraction order; skipped utterances change nothing.
pub fn consolidate_utterance(
    episode: &Episode,
    index: usize,
    store: &mut MemoryStore,
    config: &MemoryConfig,
    ctx: &Caller,
) -> Result<(ConsolidationRecord, Vec<MemoryUpdate>)> {
    let utt = &episode.utterances[index];
    let mut record = ConsolidationRecord {
        utterance_index: index,
        skipped: utt.skipped,
        claims: vec![],
        actions: vec![],
        extraction_failed: false,
        truncated: 0,
    };
    if utt.skipped {
        return Ok((record, vec![]));
    }
    let extraction = extract_claims(episode, index, config, ctx)?;
    record.extraction_failed = extraction.failed;
    record.truncated = extraction.truncated;
    let mut updates = Vec::with_capacity(extraction.claims.len());
    for claim in &extraction.claims {
        let u = consolidate_claim(claim, store, config, ctx)?;
        record.actions.push(u.action);
        updates.push(u);
    }
    record.claims = extraction.claims;
    Ok((record, updates))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMemory {
    pub store: MemoryStore,
    pub records: Vec<ConsolidationRecord>,
}

/// Consolidates every utterance in order, so introduction-phase turns seed the
/// memory before the discussion.
pub fn consolidate_episode(
    episode: &Episode,
    config: &MemoryConfig,
    ctx: &Caller,
) -> Result<EpisodeMemory> {
    let mut store = MemoryStore::new(&episode.id);
    let mut records = Vec::with_capacity(episode.utterances.len());
    for i in 0..episode.utterances.len() {
        let (record, _) = consolidate_utterance(episode, i, &mut store, config, ctx)?;
        records.push(record);
    }
    Ok(EpisodeMemory { store, records })
}
