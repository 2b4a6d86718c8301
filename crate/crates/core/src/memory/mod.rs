//! Multi-party semantic memory: atomic claims, an id-indexed item store and
//! the append-only timeline of consolidation actions it is derived from.

pub mod consolidate;
pub mod policy;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::cosine;
pub use consolidate::{
    classify_relation, consolidate_claim, consolidate_episode, consolidate_utterance,
    extract_claims, retrieve_candidates, ConsolidationRecord, EpisodeMemory, Extraction,
    MemoryConfig,
};
pub use policy::{decide_action, map_relation, select_target, Action, Candidate};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MemoryId(pub u64);

impl fmt::Display for MemoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mem_{:03}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Equivalent,
    ForwardEntail,
    BackwardEntail,
    Contradiction,
    Neutral,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::Equivalent,
        Relation::ForwardEntail,
        Relation::BackwardEntail,
        Relation::Contradiction,
        Relation::Neutral,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub speaker_id: String,
    pub speaker_name: String,
    pub target_speaker: String,
    #[serde(rename = "claim")]
    pub claim_text: String,
    pub turn_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryItem {
    pub id: MemoryId,
    pub speaker_id: String,
    pub speaker_name: String,
    pub target_speaker: String,
    #[serde(rename = "claim")]
    pub claim_text: String,
    pub embedding: Vec<f64>,
    pub created_turn: usize,
    pub last_updated_turn: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersedes: Option<MemoryId>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degraded {
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub nli: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub merge: bool,
}

/// Reference to the memory an action was judged against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRef {
    pub id: MemoryId,
    pub speaker_id: String,
    #[serde(rename = "claim")]
    pub claim_text: String,
    pub similarity: f64,
}

/// One timeline row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryUpdate {
    pub action: Action,
    pub logical_relation: Relation,
    pub source: Claim,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resulting_text: Option<String>,
    /// Id of the item created by ADD or UPDATE.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_id: Option<MemoryId>,
    #[serde(default)]
    pub degraded: Degraded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryStore {
    pub version: u32,
    pub episode_id: String,
    pub next_id: u64,
    pub items: BTreeMap<MemoryId, MemoryItem>,
    pub timeline: Vec<MemoryUpdate>,
}

impl MemoryStore {
    pub fn new(episode_id: &str) -> Self {
        Self {
            version: SNAPSHOT_VERSION,
            episode_id: episode_id.to_string(),
            next_id: 1,
            items: BTreeMap::new(),
            timeline: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: MemoryId) -> Option<&MemoryItem> {
        self.items.get(&id)
    }

    pub fn items(&self) -> impl Iterator<Item = &MemoryItem> {
        self.items.values()
    }

    /// Applies a fully resolved update: the resulting text and new id are
    /// already decided and the embedding for the resulting text is supplied.
    /// This is the only mutation path, shared by live consolidation and replay.
    pub fn apply_resolved(
        &mut self,
        update: MemoryUpdate,
        embedding: Option<Vec<f64>>,
    ) -> Result<()> {
        match update.action {
            Action::None => {}
            Action::Add => {
                let id = update
                    .new_id
                    .ok_or_else(|| Error::validation("ADD without a new id"))?;
                self.expect_fresh(id)?;
                let text = update
                    .resulting_text
                    .clone()
                    .ok_or_else(|| Error::validation("ADD without text"))?;
                let s = &update.source;
                self.items.insert(
                    id,
                    MemoryItem {
                        id,
                        speaker_id: s.speaker_id.clone(),
                        speaker_name: s.speaker_name.clone(),
                        target_speaker: s.target_speaker.clone(),
                        claim_text: text,
                        embedding: embedding
                            .ok_or_else(|| Error::validation("ADD without embedding"))?,
                        created_turn: s.turn_id,
                        last_updated_turn: s.turn_id,
                        supersedes: None,
                    },
                );
                self.next_id = id.0 + 1;
            }
            Action::Update => {
                let target = update
                    .target
                    .as_ref()
                    .ok_or_else(|| Error::validation("UPDATE without target"))?;
                let id = update
                    .new_id
                    .ok_or_else(|| Error::validation("UPDATE without a new id"))?;
                self.expect_fresh(id)?;
                let old = self.items.remove(&target.id).ok_or_else(|| {
                    Error::validation(format!("UPDATE target {} not in store", target.id))
                })?;
                let text = update
                    .resulting_text
                    .clone()
                    .ok_or_else(|| Error::validation("UPDATE without text"))?;
                self.items.insert(
                    id,
                    MemoryItem {
                        id,
                        claim_text: text,
                        embedding: embedding
                            .ok_or_else(|| Error::validation("UPDATE without embedding"))?,
                        last_updated_turn: update.source.turn_id,
                        supersedes: Some(old.id),
                        ..old
                    },
                );
                self.next_id = id.0 + 1;
            }
        }
        self.timeline.push(update);
        Ok(())
    }

    fn expect_fresh(&self, id: MemoryId) -> Result<()> {
        if id.0 < self.next_id {
            return Err(Error::validation(format!("memory id {id} reused")));
        }
        Ok(())
    }

    pub fn fresh_id(&self) -> MemoryId {
        MemoryId(self.next_id)
    }

    /// Rebuilds a store from timeline rows, embedding resulting texts anew.
    pub fn replay<'a>(
        episode_id: &str,
        timeline: impl IntoIterator<Item = &'a MemoryUpdate>,
        mut embed: impl FnMut(&str) -> Result<Vec<f64>>,
    ) -> Result<Self> {
        let mut store = MemoryStore::new(episode_id);
        for row in timeline {
            let embedding = match (&row.action, &row.resulting_text) {
                (Action::None, _) => None,
                (_, Some(text)) => Some(embed(text)?),
                (_, None) => None,
            };
            store.apply_resolved(row.clone(), embedding)?;
        }
        Ok(store)
    }

    /// The store as it stood before utterance `turn` was consolidated.
    pub fn as_of(&self, turn: usize, embed: impl FnMut(&str) -> Result<Vec<f64>>) -> Result<Self> {
        Self::replay(
            &self.episode_id,
            self.timeline.iter().take_while(|u| u.source.turn_id < turn),
            embed,
        )
    }

    /// Top-`k` items by cosine similarity to `query`, best first; equal
    /// similarity goes to the older id.
    pub fn nearest(&self, query: &[f64], k: usize) -> Vec<(&MemoryItem, f64)> {
        let mut scored: Vec<(&MemoryItem, f64)> = self
            .items
            .values()
            .map(|it| (it, cosine(query, &it.embedding)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.id.cmp(&b.0.id)));
        scored.truncate(k);
        scored
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("store serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn claim(speaker: &str, text: &str, turn: usize) -> Claim {
        Claim {
            speaker_id: speaker.into(),
            speaker_name: speaker.to_uppercase(),
            target_speaker: "Everyone".into(),
            claim_text: text.into(),
            turn_id: turn,
        }
    }

    fn embed(text: &str) -> Result<Vec<f64>> {
        Ok(crate::gateway::HashEmbedder::default().embed_one(text))
    }

    #[test]
    fn id_display() {
        assert_eq!(MemoryId(12).to_string(), "mem_012");
        assert_eq!(MemoryId(1234).to_string(), "mem_1234");
    }

    #[test]
    fn add_none_update_counts_and_replay() {
        let mut store = MemoryStore::new("e");
        let add = |store: &MemoryStore, c: Claim| MemoryUpdate {
            action: Action::Add,
            logical_relation: Relation::Neutral,
            resulting_text: Some(c.claim_text.clone()),
            source: c,
            target: None,
            new_id: Some(store.fresh_id()),
            degraded: Degraded::default(),
        };
        let u = add(&store, claim("a", "Rents are high.", 1));
        store
            .apply_resolved(u.clone(), Some(embed("Rents are high.").unwrap()))
            .unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(
            store.get(MemoryId(1)).unwrap().claim_text,
            "Rents are high."
        );

        let before = store.to_json();
        store
            .apply_resolved(
                MemoryUpdate {
                    action: Action::None,
                    logical_relation: Relation::Equivalent,
                    source: claim("a", "Rents are high.", 2),
                    target: Some(TargetRef {
                        id: MemoryId(1),
                        speaker_id: "a".into(),
                        claim_text: "Rents are high.".into(),
                        similarity: 1.0,
                    }),
                    resulting_text: None,
                    new_id: None,
                    degraded: Degraded::default(),
                },
                None,
            )
            .unwrap();
        assert_eq!(
            store.items,
            serde_json::from_str::<MemoryStore>(&before).unwrap().items
        );
        assert_eq!(store.timeline.len(), 2);

        let upd = MemoryUpdate {
            action: Action::Update,
            logical_relation: Relation::ForwardEntail,
            source: claim("a", "Rents are very high downtown.", 3),
            target: Some(TargetRef {
                id: MemoryId(1),
                speaker_id: "a".into(),
                claim_text: "Rents are high.".into(),
                similarity: 0.8,
            }),
            resulting_text: Some("Rents are very high downtown.".into()),
            new_id: Some(store.fresh_id()),
            degraded: Degraded::default(),
        };
        store
            .apply_resolved(upd, Some(embed("Rents are very high downtown.").unwrap()))
            .unwrap();
        assert_eq!(store.len(), 1);
        let item = store.get(MemoryId(2)).unwrap();
        assert_eq!(item.supersedes, Some(MemoryId(1)));
        assert_eq!((item.created_turn, item.last_updated_turn), (1, 3));

        let replayed = MemoryStore::replay("e", &store.timeline, embed).unwrap();
        assert_eq!(replayed.to_json(), store.to_json());
        assert_eq!(store.as_of(3, embed).unwrap().len(), 1);
        assert_eq!(
            store
                .as_of(3, embed)
                .unwrap()
                .get(MemoryId(1))
                .unwrap()
                .claim_text,
            "Rents are high."
        );
        assert!(store.as_of(1, embed).unwrap().is_empty());
    }

    #[test]
    fn nearest_ranks_by_similarity() {
        let mut store = MemoryStore::new("e");
        for (i, t) in [
            "Buses need funding.",
            "Rents are high.",
            "Bus fares should drop.",
        ]
        .iter()
        .enumerate()
        {
            let u = MemoryUpdate {
                action: Action::Add,
                logical_relation: Relation::Neutral,
                source: claim("a", t, i),
                target: None,
                resulting_text: Some(t.to_string()),
                new_id: Some(store.fresh_id()),
                degraded: Degraded::default(),
            };
            store.apply_resolved(u, Some(embed(t).unwrap())).unwrap();
        }
        let q = embed("Rents are high.").unwrap();
        let top = store.nearest(&q, 2);
        assert_eq!(top.len(), 2);
        assert_eq!(top[0].0.id, MemoryId(2));
        assert!((top[0].1 - 1.0).abs() < 1e-9);
        assert_eq!(store.nearest(&q, 10).len(), 3);
        assert!(MemoryStore::new("e").nearest(&q, 3).is_empty());
    }
}
