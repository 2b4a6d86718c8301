//! Knowledge contexts for rating under the five experimental conditions, and
//! the prior-conversation summarisers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::gateway::schema::{self, SummaryPayload, ThemesPayload};
use crate::memory::{MemoryItem, MemoryStore};
use crate::prompts::{self, Caller};
use crate::transcript::{word_count, Episode, Segment, Utterance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextCondition {
    Full,
    Memory,
    MemorySummary,
    ShortPrior,
    NoKnowledge,
}

impl ContextCondition {
    pub const ALL: [ContextCondition; 5] = [
        ContextCondition::Full,
        ContextCondition::Memory,
        ContextCondition::MemorySummary,
        ContextCondition::ShortPrior,
        ContextCondition::NoKnowledge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ContextCondition::Full => "full",
            ContextCondition::Memory => "memory",
            ContextCondition::MemorySummary => "memory_summary",
            ContextCondition::ShortPrior => "short_prior",
            ContextCondition::NoKnowledge => "no_knowledge",
        }
    }

    pub fn uses_memory(self) -> bool {
        matches!(
            self,
            ContextCondition::Memory | ContextCondition::MemorySummary
        )
    }
}

impl fmt::Display for ContextCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContextCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown condition '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryVariant {
    Direct,
    Recursive,
    ThemeAware,
    MemoryBased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSummary {
    pub text: String,
    pub variant: SummaryVariant,
    pub word_count: usize,
}

pub const SUMMARY_PREFIX: &str = "The prior conversation";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SummaryConfig {
    pub min_words: usize,
    pub max_words: usize,
    pub variant: SummaryVariant,
    /// Utterances folded per step by the recursive variant.
    pub recursive_chunk: usize,
}

impl Default for SummaryConfig {
    fn default() -> Self {
        Self {
            min_words: 180,
            max_words: 320,
            variant: SummaryVariant::MemoryBased,
            recursive_chunk: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextConfig {
    /// Memories retrieved per segment for both memory conditions.
    pub k: usize,
    /// Preceding turns in the short window and in the short_prior condition.
    pub short_turns: usize,
    pub summary: SummaryConfig,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            k: 20,
            short_turns: 3,
            summary: SummaryConfig::default(),
        }
    }
}

/// One transcript line as shown to a rater.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextLine {
    pub index: usize,
    pub speaker: String,
    pub text: String,
}

impl ContextLine {
    fn of(episode: &Episode, u: &Utterance) -> Self {
        Self {
            index: u.index,
            speaker: episode.speaker_of(u).display_name.clone(),
            text: u.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryLine {
    pub id: String,
    pub speaker: String,
    pub claim: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorBlock {
    Transcript { lines: Vec<ContextLine> },
    Memories { items: Vec<MemoryLine> },
    Summary { summary: PriorSummary },
    Recent { lines: Vec<ContextLine> },
    Empty,
}

fn render_lines(lines: &[ContextLine]) -> String {
    lines
        .iter()
        .map(|l| format!("[{}] {}: {}", l.index, l.speaker, l.text))
        .collect::<Vec<_>>()
        .join("\n")
}

impl PriorBlock {
    pub fn text(&self) -> String {
        match self {
            PriorBlock::Transcript { lines } | PriorBlock::Recent { lines } => render_lines(lines),
            PriorBlock::Memories { items } => items
                .iter()
                .map(|m| format!("- {}: {}", m.speaker, m.claim))
                .collect::<Vec<_>>()
                .join("\n"),
            PriorBlock::Summary { summary } => summary.text.clone(),
            PriorBlock::Empty => String::new(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PriorBlock::Transcript { .. } => "transcript",
            PriorBlock::Memories { .. } => "memories",
            PriorBlock::Summary { .. } => "summary",
            PriorBlock::Recent { .. } => "recent",
            PriorBlock::Empty => "empty",
        }
    }
}

/// Everything a rater sees for one segment. `segment` holds every turn of the
/// segment; `targets` lists the indices to be rated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub episode_id: String,
    pub segment_index: usize,
    pub topic: String,
    pub condition: ContextCondition,
    pub prior: PriorBlock,
    pub window: Vec<ContextLine>,
    pub segment: Vec<ContextLine>,
    pub targets: Vec<usize>,
    /// A memory condition was requested but nothing was retrieved.
    pub empty_memory: bool,
}

impl ContextBundle {
    pub fn prior_text(&self) -> String {
        let t = self.prior.text();
        if t.is_empty() {
            "(none)".into()
        } else {
            t
        }
    }

    pub fn window_text(&self) -> String {
        if self.window.is_empty() {
            "(none)".into()
        } else {
            render_lines(&self.window)
        }
    }

    pub fn targets_text(&self) -> String {
        self.segment
            .iter()
            .map(|l| {
                let mark = if self.targets.contains(&l.index) {
                    ""
                } else {
                    " (context only, do not rate)"
                };
                format!("[{}] {}{mark}: {}", l.index, l.speaker, l.text)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn target_lines(&self) -> impl Iterator<Item = &ContextLine> {
        self.segment
            .iter()
            .filter(|l| self.targets.contains(&l.index))
    }
}

/// What a summary is written from.
#[derive(Debug, Clone, Copy)]
pub enum SummarySource<'a> {
    Memories(&'a [MemoryItem]),
    Transcript(&'a [ContextLine]),
}

impl SummarySource<'_> {
    fn text(&self) -> String {
        match self {
            SummarySource::Memories(items) => items
                .iter()
                .map(|m| format!("- {}: {}", m.speaker_name, m.claim_text))
                .collect::<Vec<_>>()
                .join("\n"),
            SummarySource::Transcript(lines) => render_lines(lines),
        }
    }

    fn is_empty(&self) -> bool {
        match self {
            SummarySource::Memories(m) => m.is_empty(),
            SummarySource::Transcript(l) => l.is_empty(),
        }
    }
}

fn check_summary(text: &str, config: &SummaryConfig) -> std::result::Result<usize, String> {
    let n = word_count(text);
    if !text.trim_start().starts_with(SUMMARY_PREFIX) {
        return Err(format!("summary must begin with \"{SUMMARY_PREFIX}\""));
    }
    if n < config.min_words || n > config.max_words {
        return Err(format!(
            "summary has {n} words, expected {} to {}",
            config.min_words, config.max_words
        ));
    }
    Ok(n)
}

fn summary_call(
    template: &str,
    topic: &str,
    source: &str,
    extra: &[(&str, String)],
    config: &SummaryConfig,
    caller: &Caller,
) -> Result<(String, usize)> {
    let mut corrective = String::new();
    for attempt in 0..2 {
        let mut vars = vec![
            ("topic", topic.to_string()),
            ("source", source.to_string()),
            ("min_words", config.min_words.to_string()),
            ("max_words", config.max_words.to_string()),
            ("corrective", corrective.clone()),
        ];
        vars.extend(extra.iter().cloned());
        let mut inputs = json!({"topic": topic, "source": source, "attempt": attempt});
        for (k, v) in extra {
            inputs[*k] = match *k {
                "themes" => json!(v.split(", ").collect::<Vec<_>>()),
                _ => json!(v),
            };
        }
        let payload: SummaryPayload =
            caller.call(schema::SUMMARY, prompts::render(template, &vars), inputs)?;
        match check_summary(&payload.summary, config) {
            Ok(n) => return Ok((payload.summary, n)),
            Err(problem) => {
                tracing::warn!(attempt, %problem, "summary rejected");
                if attempt == 1 {
                    return Err(Error::SchemaInvalid {
                        schema: schema::SUMMARY.into(),
                        message: problem,
                        raw: payload.summary,
                    });
                }
                corrective = format!("Your previous answer was rejected: {problem}. Fix this.");
            }
        }
    }
    unreachable!("two attempts always return")
}

/// Summarises prior conversation. Content rules (prefix, length) get exactly
/// one corrective retry before the raw text is returned as an error.
pub fn summarise_memory(
    topic: &str,
    source: SummarySource,
    variant: SummaryVariant,
    config: &SummaryConfig,
    caller: &Caller,
) -> Result<PriorSummary> {
    if source.is_empty() {
        return Err(Error::validation(format!(
            "{variant:?} summary needs a non-empty source"
        )));
    }
    if variant == SummaryVariant::MemoryBased && !matches!(source, SummarySource::Memories(_)) {
        return Err(Error::validation(
            "memory-based summary needs retrieved memories",
        ));
    }
    let (text, word_count) = match variant {
        SummaryVariant::Direct => summary_call(
            prompts::SUMMARY_DIRECT,
            topic,
            &source.text(),
            &[],
            config,
            caller,
        )?,
        SummaryVariant::MemoryBased => summary_call(
            prompts::SUMMARY_MEMORY_BASED,
            topic,
            &source.text(),
            &[],
            config,
            caller,
        )?,
        SummaryVariant::ThemeAware => {
            let text = source.text();
            let prompt = prompts::render(
                prompts::THEMES,
                &[("topic", topic.into()), ("source", text.clone())],
            );
            let themes: ThemesPayload = caller.call(
                schema::THEMES,
                prompt,
                json!({"topic": topic, "source": text}),
            )?;
            let extra = [("themes", themes.themes.join(", "))];
            summary_call(
                prompts::SUMMARY_THEME_AWARE,
                topic,
                &text,
                &extra,
                config,
                caller,
            )?
        }
        SummaryVariant::Recursive => {
            let chunks: Vec<String> = match source {
                SummarySource::Transcript(lines) => lines
                    .chunks(config.recursive_chunk.max(1))
                    .map(render_lines)
                    .collect(),
                SummarySource::Memories(_) => vec![source.text()],
            };
            let mut previous = String::new();
            let mut last = (String::new(), 0);
            for chunk in chunks {
                let prev = if previous.is_empty() {
                    "(nothing yet)".to_string()
                } else {
                    previous.clone()
                };
                last = summary_call(
                    prompts::SUMMARY_RECURSIVE,
                    topic,
                    &chunk,
                    &[("previous_summary", prev)],
                    config,
                    caller,
                )?;
                previous = last.0.clone();
            }
            last
        }
    };
    Ok(PriorSummary {
        text,
        variant,
        word_count,
    })
}

/// The segment's retrieval query: its non-skipped text, concatenated.
pub fn segment_query(episode: &Episode, segment: &Segment) -> String {
    episode
        .utterances_in(segment.interval)
        .iter()
        .filter(|u| !u.skipped)
        .map(|u| u.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Top-k memories by cosine similarity to the segment text.
pub fn retrieve_for_segment(
    episode: &Episode,
    segment: &Segment,
    store: &MemoryStore,
    k: usize,
    caller: &Caller,
) -> Result<Vec<MemoryItem>> {
    if store.is_empty() || k == 0 {
        return Ok(vec![]);
    }
    let query = segment_query(episode, segment);
    if query.trim().is_empty() {
        return Ok(vec![]);
    }
    let q = caller.embed(&query)?;
    Ok(store
        .nearest(&q, k)
        .into_iter()
        .map(|(it, _)| it.clone())
        .collect())
}

/// Builds the rating context. Memory conditions need `store` frozen at the
/// segment start; a store holding later turns is rejected.
pub fn build_context(
    episode: &Episode,
    segment: &Segment,
    store: Option<&MemoryStore>,
    condition: ContextCondition,
    config: &ContextConfig,
    caller: &Caller,
) -> Result<ContextBundle> {
    let start = segment.interval.start;
    if segment.interval.end >= episode.utterances.len() {
        return Err(Error::validation(format!(
            "segment {} lies outside episode {}",
            segment.segment_index, episode.id
        )));
    }
    let preceding: Vec<ContextLine> = episode.utterances[..start]
        .iter()
        .map(|u| ContextLine::of(episode, u))
        .collect();
    let recent = preceding[preceding.len().saturating_sub(config.short_turns)..].to_vec();
    let mut empty_memory = false;

    let retrieved = if condition.uses_memory() {
        let store = store.ok_or_else(|| {
            Error::validation(format!("condition {condition} needs a memory store"))
        })?;
        if let Some(late) = store.timeline.iter().find(|u| u.source.turn_id >= start) {
            return Err(Error::validation(format!(
                "memory store holds turn {} but segment {} starts at {start}",
                late.source.turn_id, segment.segment_index
            )));
        }
        let items = retrieve_for_segment(episode, segment, store, config.k, caller)?;
        empty_memory = items.is_empty();
        items
    } else {
        vec![]
    };

    let (prior, window) = match condition {
        ContextCondition::Full => (PriorBlock::Transcript { lines: preceding }, vec![]),
        ContextCondition::ShortPrior => (PriorBlock::Recent { lines: recent }, vec![]),
        ContextCondition::NoKnowledge => (PriorBlock::Empty, vec![]),
        ContextCondition::Memory if empty_memory => (PriorBlock::Empty, recent),
        ContextCondition::Memory => {
            let items = retrieved
                .iter()
                .map(|m| MemoryLine {
                    id: m.id.to_string(),
                    speaker: m.speaker_name.clone(),
                    claim: m.claim_text.clone(),
                })
                .collect();
            (PriorBlock::Memories { items }, recent)
        }
        ContextCondition::MemorySummary if empty_memory => (PriorBlock::Empty, recent),
        ContextCondition::MemorySummary => {
            let source = match config.summary.variant {
                SummaryVariant::MemoryBased => SummarySource::Memories(&retrieved),
                _ => SummarySource::Transcript(&preceding),
            };
            let summary = summarise_memory(
                &episode.topic,
                source,
                config.summary.variant,
                &config.summary,
                caller,
            )?;
            (PriorBlock::Summary { summary }, recent)
        }
    };

    let lines: Vec<ContextLine> = episode
        .utterances_in(segment.interval)
        .iter()
        .map(|u| ContextLine::of(episode, u))
        .collect();
    let targets = episode
        .utterances_in(segment.interval)
        .iter()
        .filter(|u| !u.skipped)
        .map(|u| u.index)
        .collect();
    Ok(ContextBundle {
        episode_id: episode.id.clone(),
        segment_index: segment.segment_index,
        topic: episode.topic.clone(),
        condition,
        prior,
        window,
        segment: lines,
        targets,
        empty_memory,
    })
}
