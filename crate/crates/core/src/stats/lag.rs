//! Participant CIG as a function of turns since the last moderator act.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::transcript::{Episode, ModeratorAct, Role};

pub const DEFAULT_MAX_LAG: usize = 5;

/// Which ratings feed the corpus-mean baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagSource {
    Human,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagCell {
    pub act: ModeratorAct,
    pub lag: usize,
    pub n: usize,
    pub mean_cig: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeratorLagProfile {
    pub source: LagSource,
    pub max_lag: usize,
    pub cells: Vec<LagCell>,
    /// Share of labelled moderator turns per act, in percent.
    pub coverage_pct: BTreeMap<ModeratorAct, f64>,
    pub corpus_mean_cig: Option<f64>,
}

/// Aligns each rated participant turn to the latest moderator turn before it.
/// Lag is the index distance; turns beyond `max_lag`, turns with no moderator
/// antecedent, and turns following an unlabelled moderator turn are left out.
pub fn moderator_lag(
    episodes: &[(&Episode, &BTreeMap<usize, f64>)],
    max_lag: usize,
    source: LagSource,
) -> ModeratorLagProfile {
    let mut acc: BTreeMap<(ModeratorAct, usize), (f64, usize)> = BTreeMap::new();
    let mut act_counts: BTreeMap<ModeratorAct, usize> = BTreeMap::new();
    let mut moderator_turns = 0usize;
    let (mut total, mut count) = (0.0, 0usize);
    for (episode, cig) in episodes {
        let mut anchor: Option<(usize, Option<ModeratorAct>)> = None;
        for u in &episode.utterances {
            match episode.role_of(u.index) {
                Role::Moderator => {
                    moderator_turns += 1;
                    let act = episode.moderator_acts.get(&u.index).copied();
                    if let Some(a) = act {
                        *act_counts.entry(a).or_default() += 1;
                    }
                    anchor = Some((u.index, act));
                }
                Role::Participant => {
                    let Some(&score) = cig.get(&u.index) else {
                        continue;
                    };
                    total += score;
                    count += 1;
                    if let Some((m, Some(act))) = anchor {
                        let lag = u.index - m;
                        if lag <= max_lag {
                            let e = acc.entry((act, lag)).or_default();
                            e.0 += score;
                            e.1 += 1;
                        }
                    }
                }
                Role::Audience => {}
            }
        }
    }
    let cells = acc
        .into_iter()
        .map(|((act, lag), (s, n))| LagCell {
            act,
            lag,
            n,
            mean_cig: s / n as f64,
        })
        .collect();
    let coverage_pct = act_counts
        .into_iter()
        .map(|(a, c)| (a, 100.0 * c as f64 / moderator_turns as f64))
        .collect();
    ModeratorLagProfile {
        source,
        max_lag,
        cells,
        coverage_pct,
        corpus_mean_cig: (count > 0).then(|| total / count as f64),
    }
}
