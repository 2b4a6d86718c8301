//! The speaker-aware consolidation policy: bidirectional relation mapping,
//! target selection ladder and action decision. All functions are pure.

use serde::{Deserialize, Serialize};

use super::{MemoryId, Relation};
use crate::gateway::schema::NliLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Action {
    Add,
    Update,
    None,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Add => "ADD",
            Action::Update => "UPDATE",
            Action::None => "NONE",
        }
    }
}

/// Maps the two directed judgments (new ⇒ existing, existing ⇒ new).
/// Contradiction in either direction wins over any entailment.
pub fn map_relation(forward: NliLabel, backward: NliLabel) -> Relation {
    use NliLabel::*;
    match (forward, backward) {
        (Contradiction, _) | (_, Contradiction) => Relation::Contradiction,
        (Entailment, Entailment) => Relation::Equivalent,
        (Entailment, _) => Relation::ForwardEntail,
        (_, Entailment) => Relation::BackwardEntail,
        _ => Relation::Neutral,
    }
}

/// One retrieved memory with its judged relation to the new claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: MemoryId,
    pub same_speaker: bool,
    pub similarity: f64,
    pub relation: Relation,
}

/// Ladder rung of a candidate, lower is preferred; `None` when the candidate
/// can never be a target.
pub fn rung(c: &Candidate) -> Option<u8> {
    use Relation::*;
    match (c.same_speaker, c.relation) {
        (true, Equivalent) => Some(1),
        (true, BackwardEntail) => Some(2),
        (true, Contradiction | ForwardEntail) => Some(3),
        (false, Neutral) | (true, Neutral) => None,
        (false, _) => Some(4),
    }
}

/// Picks at most one target: best rung, then highest similarity, then the
/// oldest memory id.
pub fn select_target(candidates: &[Candidate]) -> Option<&Candidate> {
    candidates
        .iter()
        .filter_map(|c| rung(c).map(|r| (r, c)))
        .min_by(|(ra, a), (rb, b)| {
            ra.cmp(rb)
                .then(b.similarity.total_cmp(&a.similarity))
                .then(a.id.cmp(&b.id))
        })
        .map(|(_, c)| c)
}

/// The action for a claim given its selected target (if any). Different
/// speakers never touch each other's memories; their relation is kept for
/// provenance only.
pub fn decide_action(selected: Option<(bool, Relation)>) -> (Action, Relation) {
    use Relation::*;
    match selected {
        None => (Action::Add, Neutral),
        Some((_, Neutral)) => (Action::Add, Neutral),
        Some((true, rel @ (Equivalent | BackwardEntail))) => (Action::None, rel),
        Some((true, rel @ (ForwardEntail | Contradiction))) => (Action::Update, rel),
        Some((false, rel)) => (Action::Add, rel),
    }
}
