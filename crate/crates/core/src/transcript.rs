//! Multi-party transcripts: loading, skip rules and descriptive statistics.
//!
//! Episode files are line-delimited JSON. The first non-blank line is a header
//! `{id, topic, corpus_tag}`; every following line is one utterance record
//! `{index, speaker_id, speaker_name, role, stance?, text, phase, act?}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Participant,
    Moderator,
    Audience,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stance {
    For,
    Against,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Introduction,
    Discussion,
    Conclusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    Moderator,
    Audience,
    TooShort,
    Fragment,
}

/// Moderator move labels, supplied as input annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeratorAct {
    Probing,
    Confronting,
    Interpretation,
    Supplementing,
    Utilities,
}

impl ModeratorAct {
    pub const ALL: [ModeratorAct; 5] = [
        ModeratorAct::Probing,
        ModeratorAct::Confronting,
        ModeratorAct::Interpretation,
        ModeratorAct::Supplementing,
        ModeratorAct::Utilities,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModeratorAct::Probing => "probing",
            ModeratorAct::Confronting => "confronting",
            ModeratorAct::Interpretation => "interpretation",
            ModeratorAct::Supplementing => "supplementing",
            ModeratorAct::Utilities => "utilities",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speaker {
    pub id: String,
    pub display_name: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stance: Option<Stance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: usize,
    pub speaker_id: String,
    pub text: String,
    pub token_count: usize,
    pub phase: Phase,
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_reason: Option<SkipReason>,
}

/// Inclusive utterance index interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, index: usize) -> bool {
        (self.start..=self.end).contains(&index)
    }

    pub fn range(&self) -> RangeInclusive<usize> {
        self.start..=self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseBoundaries {
    pub introduction: Option<Interval>,
    pub discussion: Interval,
    pub conclusion: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub topic: String,
    pub corpus_tag: String,
    pub phase_boundaries: PhaseBoundaries,
    pub speakers: Vec<Speaker>,
    pub utterances: Vec<Utterance>,
    #[serde(default)]
    pub moderator_acts: BTreeMap<usize, ModeratorAct>,
}

impl Episode {
    pub fn speaker(&self, id: &str) -> Option<&Speaker> {
        self.speakers.iter().find(|s| s.id == id)
    }

    pub fn speaker_of(&self, utterance: &Utterance) -> &Speaker {
        self.speaker(&utterance.speaker_id)
            .expect("utterance speakers are registered at load time")
    }

    pub fn role_of(&self, index: usize) -> Role {
        self.speaker_of(&self.utterances[index]).role
    }

    pub fn discussion(&self) -> Interval {
        self.phase_boundaries.discussion
    }

    pub fn utterances_in(&self, interval: Interval) -> &[Utterance] {
        &self.utterances[interval.start..=interval.end]
    }
}

/// A contiguous sub-topic unit of the discussion phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_index: usize,
    pub interval: Interval,
    pub subtopic: String,
    pub boundary_confidence: f64,
}

#[derive(Debug, Deserialize)]
struct HeaderLine {
    id: Option<String>,
    topic: Option<String>,
    corpus_tag: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    index: usize,
    speaker_id: String,
    speaker_name: String,
    role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stance: Option<Stance>,
    text: String,
    phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    act: Option<ModeratorAct>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skip_reason: Option<SkipReason>,
}

/// Words for the skip rules: whitespace tokens that carry at least one
/// alphanumeric character.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace()
        .filter(|tok| tok.chars().any(char::is_alphanumeric))
        .count()
}

fn has_terminal_punctuation(text: &str) -> bool {
    let trimmed = text
        .trim_end()
        .trim_end_matches(['"', '\'', '\u{201d}', '\u{2019}', ')']);
    trimmed.ends_with(['.', '!', '?', '\u{2026}'])
}

/// Truncated or fragmentary turn: at most three words, or at most five words
/// without terminal punctuation.
pub fn is_fragment(text: &str) -> bool {
    let words = word_count(text);
    words <= 3 || (words <= 5 && !has_terminal_punctuation(text))
}

pub fn parse_episode(source: &str) -> Result<Episode> {
    let mut header: Option<(usize, HeaderLine)> = None;
    let mut records: Vec<(usize, RecordLine)> = Vec::new();
    let mut seen = BTreeSet::new();

    for (i, raw) in source.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: HeaderLine = serde_json::from_str(raw).map_err(|e| Error::Transcript {
                line,
                message: format!("malformed header: {e}"),
            })?;
            header = Some((line, h));
            continue;
        }
        let rec: RecordLine = serde_json::from_str(raw).map_err(|e| Error::Transcript {
            line,
            message: format!("malformed record: {e}"),
        })?;
        if !seen.insert(rec.index) {
            return Err(Error::Transcript {
                line,
                message: format!("duplicate index {}", rec.index),
            });
        }
        if rec.index != records.len() {
            return Err(Error::Transcript {
                line,
                message: format!(
                    "non-contiguous index {} (expected {})",
                    rec.index,
                    records.len()
                ),
            });
        }
        records.push((line, rec));
    }

    let (hline, header) = header.ok_or(Error::Transcript {
        line: 1,
        message: "missing episode header".into(),
    })?;
    let topic = header
        .topic
        .filter(|t| !t.trim().is_empty())
        .ok_or(Error::Transcript {
            line: hline,
            message: "missing topic".into(),
        })?;
    let id = header
        .id
        .filter(|s| !s.is_empty())
        .ok_or(Error::Transcript {
            line: hline,
            message: "missing episode id".into(),
        })?;
    let corpus_tag = header.corpus_tag.unwrap_or_default();

    let mut speakers: Vec<Speaker> = Vec::new();
    let mut utterances = Vec::with_capacity(records.len());
    let mut acts = BTreeMap::new();
    let mut last_phase = Phase::Introduction;
    let mut phase_spans: BTreeMap<Phase, Interval> = BTreeMap::new();

    for (line, rec) in records {
        if rec.phase < last_phase {
            return Err(Error::Transcript {
                line,
                message: format!("phase {:?} after {:?}", rec.phase, last_phase),
            });
        }
        last_phase = rec.phase;
        phase_spans
            .entry(rec.phase)
            .and_modify(|iv| iv.end = rec.index)
            .or_insert(Interval::new(rec.index, rec.index));

        match speakers.iter().find(|s| s.id == rec.speaker_id) {
            Some(s) if s.role != rec.role => {
                return Err(Error::Transcript {
                    line,
                    message: format!(
                        "speaker {} changes role from {:?} to {:?}",
                        s.id, s.role, rec.role
                    ),
                })
            }
            Some(_) => {}
            None => speakers.push(Speaker {
                id: rec.speaker_id.clone(),
                display_name: rec.speaker_name.clone(),
                role: rec.role,
                stance: rec.stance,
            }),
        }
        if let Some(act) = rec.act {
            if rec.role != Role::Moderator {
                return Err(Error::Transcript {
                    line,
                    message: "moderator act on a non-moderator turn".into(),
                });
            }
            acts.insert(rec.index, act);
        }
        if rec.skipped != rec.skip_reason.is_some() {
            return Err(Error::Transcript {
                line,
                message: "skipped flag and skip_reason disagree".into(),
            });
        }
        utterances.push(Utterance {
            index: rec.index,
            speaker_id: rec.speaker_id,
            token_count: word_count(&rec.text),
            text: rec.text,
            phase: rec.phase,
            skipped: rec.skipped,
            skip_reason: rec.skip_reason,
        });
    }

    let discussion = phase_spans
        .get(&Phase::Discussion)
        .copied()
        .ok_or(Error::Transcript {
            line: hline,
            message: "episode has no discussion phase".into(),
        })?;

    Ok(Episode {
        id,
        topic,
        corpus_tag,
        phase_boundaries: PhaseBoundaries {
            introduction: phase_spans.get(&Phase::Introduction).copied(),
            discussion,
            conclusion: phase_spans.get(&Phase::Conclusion).copied(),
        },
        speakers,
        utterances,
        moderator_acts: acts,
    })
}

pub fn load_episode(path: impl AsRef<Path>) -> Result<Episode> {
    let text = std::fs::read_to_string(path)?;
    parse_episode(&text)
}

/// Serializes an episode in the same line format [`parse_episode`] reads.
pub fn write_episode(episode: &Episode) -> String {
    let mut out = String::new();
    let header = serde_json::json!({
        "id": episode.id,
        "topic": episode.topic,
        "corpus_tag": episode.corpus_tag,
    });
    writeln!(out, "{header}").unwrap();
    for u in &episode.utterances {
        let speaker = episode.speaker_of(u);
        let rec = RecordLine {
            index: u.index,
            speaker_id: u.speaker_id.clone(),
            speaker_name: speaker.display_name.clone(),
            role: speaker.role,
            stance: speaker.stance,
            text: u.text.clone(),
            phase: u.phase,
            act: episode.moderator_acts.get(&u.index).copied(),
            skipped: u.skipped,
            skip_reason: u.skip_reason,
        };
        writeln!(out, "{}", serde_json::to_string(&rec).unwrap()).unwrap();
    }
    out
}

/// Marks moderator and audience turns, and turns under five words, as skipped.
/// Every other utterance is reset to unskipped, so the rule is idempotent.
pub fn apply_skip_rules(episode: &Episode) -> Episode {
    let mut out = episode.clone();
    for u in &mut out.utterances {
        let role = episode.speaker_of(u).role;
        let reason = match role {
            Role::Moderator => Some(SkipReason::Moderator),
            Role::Audience => Some(SkipReason::Audience),
            Role::Participant if word_count(&u.text) < 5 => Some(SkipReason::TooShort),
            Role::Participant => None,
        };
        u.skipped = reason.is_some();
        u.skip_reason = reason;
    }
    out
}

/// Segment-selection mode: the base rules plus the fragment rule.
pub fn apply_selection_skip_rules(episode: &Episode) -> Episode {
    let mut out = apply_skip_rules(episode);
    for u in &mut out.utterances {
        if !u.skipped && is_fragment(&u.text) {
            u.skipped = true;
            u.skip_reason = Some(SkipReason::Fragment);
        }
    }
    out
}

/// Mean absolute difference form: sum_ij |x_i - x_j| / (2 n^2 mean).
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // sum_ij |x_i - x_j| = 2 * sum_i (2i - n + 1) x_(i) over the sorted sample
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - n as f64 + 1.0) * x)
        .sum();
    let mean = total / n as f64;
    (2.0 * weighted) / (2.0 * (n * n) as f64 * mean)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScopeStats {
    pub utterances: usize,
    pub non_skipped_utterances: usize,
    pub speakers: usize,
    pub words_per_utterance: f64,
    pub words_per_non_skipped_utterance: f64,
    pub speaker_gini: f64,
    pub skipped_token_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub episode_id: String,
    pub episode: ScopeStats,
    pub segments: Vec<ScopeStats>,
}

impl StatsReport {
    /// Flat key/value rows, in a stable order.
    pub fn to_rows(&self) -> Vec<(String, String)> {
        fn push(rows: &mut Vec<(String, String)>, prefix: &str, s: &ScopeStats) {
            let fields: [(&str, String); 7] = [
                ("utterances", s.utterances.to_string()),
                (
                    "non_skipped_utterances",
                    s.non_skipped_utterances.to_string(),
                ),
                ("speakers", s.speakers.to_string()),
                ("words_per_utterance", fmt_f(s.words_per_utterance)),
                (
                    "words_per_non_skipped_utterance",
                    fmt_f(s.words_per_non_skipped_utterance),
                ),
                ("speaker_gini", fmt_f(s.speaker_gini)),
                ("skipped_token_pct", fmt_f(s.skipped_token_pct)),
            ];
            for (k, v) in fields {
                rows.push((format!("{prefix}{k}"), v));
            }
        }
        let mut rows = vec![("episode_id".to_string(), self.episode_id.clone())];
        push(&mut rows, "session.", &self.episode);
        for (i, s) in self.segments.iter().enumerate() {
            push(&mut rows, &format!("segment.{i}."), s);
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        for (k, v) in self.to_rows() {
            writeln!(out, "{k},{v}").unwrap();
        }
        out
    }
}

pub(crate) fn fmt_f(x: f64) -> String {
    format!("{:.6}", x)
}

fn scope_stats(episode: &Episode, utts: &[Utterance]) -> ScopeStats {
    let n = utts.len();
    let total_tokens: usize = utts.iter().map(|u| u.token_count).sum();
    let skipped_tokens: usize = utts
        .iter()
        .filter(|u| u.skipped)
        .map(|u| u.token_count)
        .sum();
    let kept: Vec<&Utterance> = utts.iter().filter(|u| !u.skipped).collect();
    let kept_tokens: usize = kept.iter().map(|u| u.token_count).sum();

    let speakers: BTreeSet<&str> = utts.iter().map(|u| u.speaker_id.as_str()).collect();
    let mut per_participant: BTreeMap<&str, f64> = BTreeMap::new();
    for u in utts {
        if episode.speaker_of(u).role == Role::Participant {
            let slot = per_participant.entry(u.speaker_id.as_str()).or_insert(0.0);
            if !u.skipped {
                *slot += u.token_count as f64;
            }
        }
    }
    let counts: Vec<f64> = per_participant.into_values().collect();

    ScopeStats {
        utterances: n,
        non_skipped_utterances: kept.len(),
        speakers: speakers.len(),
        words_per_utterance: if n == 0 {
            0.0
        } else {
            total_tokens as f64 / n as f64
        },
        words_per_non_skipped_utterance: if kept.is_empty() {
            0.0
        } else {
            kept_tokens as f64 / kept.len() as f64
        },
        speaker_gini: gini(&counts),
        skipped_token_pct: if total_tokens == 0 {
            0.0
        } else {
            100.0 * skipped_tokens as f64 / total_tokens as f64
        },
    }
}

/// Session-level and per-segment descriptive statistics. The speaker Gini is
/// taken over participants' non-skipped token counts.
pub fn descriptive_stats(episode: &Episode, segments: &[Segment]) -> StatsReport {
    StatsReport {
        episode_id: episode.id.clone(),
        episode: scope_stats(episode, &episode.utterances),
        segments: segments
            .iter()
            .map(|s| scope_stats(episode, episode.utterances_in(s.interval)))
            .collect(),
    }
}
