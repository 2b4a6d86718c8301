//! Human annotation sessions: chronological task serving, a server-side
//! reading lock, validated append-only rating storage and per-session
//! agreement checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::context::{ContextBundle, ContextCondition, ContextLine};
use crate::rating::{Dimension, Level, RatingCondition, RatingRecord, Scores};
use crate::stats::{quality_control, AgreementReport, QcStatus, SessionRatings};
use crate::text::TextAnalyzer;
use crate::transcript::{Episode, Stance};

pub const LOCK_SECONDS: u64 = 60;

/// Seconds since the Unix epoch, UTC.
pub trait Clock: Send + Sync {
    fn now(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start: u64) -> Self {
        Self(AtomicU64::new(start))
    }

    pub fn advance(&self, seconds: u64) {
        self.0.fetch_add(seconds, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    UnknownSession,
    NotAssigned,
    OutOfOrder,
    SessionComplete,
    UnknownTask,
    NotServed,
    LockActive,
    OutOfRange,
    MissingTargets,
    InvalidTargets,
    InvalidScores,
    InsufficientAnnotators,
    Storage,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::UnknownSession => "unknown_session",
            ErrorCode::NotAssigned => "not_assigned",
            ErrorCode::OutOfOrder => "out_of_order",
            ErrorCode::SessionComplete => "session_complete",
            ErrorCode::UnknownTask => "unknown_task",
            ErrorCode::NotServed => "not_served",
            ErrorCode::LockActive => "lock_active",
            ErrorCode::OutOfRange => "out_of_range",
            ErrorCode::MissingTargets => "missing_targets",
            ErrorCode::InvalidTargets => "invalid_targets",
            ErrorCode::InvalidScores => "invalid_scores",
            ErrorCode::InsufficientAnnotators => "insufficient_annotators",
            ErrorCode::Storage => "storage",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[error("{}: {message}", code.as_str())]
pub struct AnnotationError {
    pub code: ErrorCode,
    pub message: String,
    /// Seconds left on the reading lock, for `lock_active`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry_after: Option<u64>,
}

impl AnnotationError {
    fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            retry_after: None,
        }
    }
}

pub type AnnotationResult<T> = std::result::Result<T, AnnotationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskVariant {
    InfoOnly,
    ThreeAspects,
}

impl TaskVariant {
    pub fn dimensions(self) -> &'static [Dimension] {
        match self {
            TaskVariant::InfoOnly => &[Dimension::Cig],
            TaskVariant::ThreeAspects => &Dimension::ASPECTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetView {
    pub index: usize,
    pub speaker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stance: Option<Stance>,
    pub text: String,
    /// Content lemma shared with the prior summary → character offsets of
    /// its occurrences in the summary.
    pub overlap: BTreeMap<String, Vec<usize>>,
}

/// One segment of a session, prepared once and served to every annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTask {
    pub bundle: ContextBundle,
    pub targets: Vec<TargetView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub session_id: String,
    pub variant: TaskVariant,
    pub annotators: Vec<String>,
    /// Chronological.
    pub segments: Vec<SegmentTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub session_id: String,
    pub annotator_id: String,
    pub variant: TaskVariant,
    /// Zero-based position within the session.
    pub position: usize,
    pub total: usize,
    pub topic: String,
    pub prior_summary: String,
    pub window: Vec<ContextLine>,
    pub targets: Vec<TargetView>,
    /// The model-side context for the same segment, verbatim.
    pub bundle: ContextBundle,
    pub served_at: u64,
}

/// Wire form of one utterance's scores; range checks happen on submit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreInput {
    pub utterance_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cig: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub novelty: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implication_scope: Option<u8>,
}

impl ScoreInput {
    fn get(&self, d: Dimension) -> Option<u8> {
        match d {
            Dimension::Cig => self.cig,
            Dimension::Novelty => self.novelty,
            Dimension::Relevance => self.relevance,
            Dimension::ImplicationScope => self.implication_scope,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmittedRating {
    pub task_id: String,
    pub annotator_id: String,
    pub utterance_index: usize,
    pub scores: Scores,
    pub version: u32,
    pub submitted_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub task_id: String,
    pub version: u32,
    pub accepted: usize,
    pub session_complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Directive {
    RecruitThird,
    Drop { annotator: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionAgreement {
    pub session_id: String,
    pub completed: Vec<String>,
    pub report: AgreementReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directive: Option<Directive>,
}

/// Character offsets of every summary token whose lemma is a content lemma
/// of the target.
pub fn keyword_overlap(
    analyzer: &dyn TextAnalyzer,
    summary: &str,
    target: &str,
) -> BTreeMap<String, Vec<usize>> {
    let wanted: BTreeSet<String> = analyzer.content_lemmas(target).into_iter().collect();
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for t in analyzer.tokenize(summary) {
        if t.is_content && wanted.contains(&t.lemma) {
            out.entry(t.lemma)
                .or_default()
                .push(summary[..t.start].chars().count());
        }
    }
    out
}

/// Prepares the served view of one segment. Only `memory_summary` bundles
/// may be shown to annotators.
pub fn segment_task(
    episode: &Episode,
    bundle: ContextBundle,
    analyzer: &dyn TextAnalyzer,
) -> crate::Result<SegmentTask> {
    if bundle.condition != ContextCondition::MemorySummary {
        return Err(crate::Error::validation(format!(
            "annotation tasks use the memory_summary context, got {}",
            bundle.condition
        )));
    }
    let summary = bundle.prior.text();
    let targets = bundle
        .target_lines()
        .map(|l| {
            let u = &episode.utterances[l.index];
            if u.skipped {
                return Err(crate::Error::validation(format!(
                    "utterance {} is skipped and cannot be a target",
                    l.index
                )));
            }
            Ok(TargetView {
                index: l.index,
                speaker: l.speaker.clone(),
                stance: episode.speaker_of(u).stance,
                text: l.text.clone(),
                overlap: keyword_overlap(analyzer, &summary, &l.text),
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    Ok(SegmentTask { bundle, targets })
}

/// One line of the append-only log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum LogEvent {
    Served {
        task_id: String,
        session_id: String,
        annotator_id: String,
        position: usize,
        served_at: u64,
    },
    Rated(SubmittedRating),
}

#[derive(Debug, Clone)]
struct Served {
    session_id: String,
    annotator_id: String,
    position: usize,
    served_at: u64,
}

#[derive(Debug, Default)]
struct State {
    tasks: BTreeMap<String, Served>,
    by_slot: BTreeMap<(String, String, usize), String>,
    ratings: Vec<SubmittedRating>,
    log: Option<File>,
}

impl State {
    fn append(&mut self, event: LogEvent) -> AnnotationResult<()> {
        if let Some(f) = self.log.as_mut() {
            let line = serde_json::to_string(&event).expect("log events serialize");
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(|e| AnnotationError::new(ErrorCode::Storage, e.to_string()))?;
        }
        self.apply(event);
        Ok(())
    }

    fn apply(&mut self, event: LogEvent) {
        match event {
            LogEvent::Served {
                task_id,
                session_id,
                annotator_id,
                position,
                served_at,
            } => {
                self.by_slot.insert(
                    (session_id.clone(), annotator_id.clone(), position),
                    task_id.clone(),
                );
                self.tasks.insert(
                    task_id,
                    Served {
                        session_id,
                        annotator_id,
                        position,
                        served_at,
                    },
                );
            }
            LogEvent::Rated(r) => self.ratings.push(r),
        }
    }

    fn latest_version(&self, task_id: &str) -> u32 {
        self.ratings
            .iter()
            .filter(|r| r.task_id == task_id)
            .map(|r| r.version)
            .max()
            .unwrap_or(0)
    }

    fn is_complete(&self, task_id: &str) -> bool {
        self.latest_version(task_id) > 0
    }
}

pub struct AnnotationService {
    sessions: BTreeMap<String, SessionSpec>,
    clock: Arc<dyn Clock>,
    lock_seconds: u64,
    state: Mutex<State>,
}

impl AnnotationService {
    pub fn new(sessions: Vec<SessionSpec>, clock: Arc<dyn Clock>) -> Self {
        Self {
            sessions: sessions
                .into_iter()
                .map(|s| (s.session_id.clone(), s))
                .collect(),
            clock,
            lock_seconds: LOCK_SECONDS,
            state: Mutex::new(State::default()),
        }
    }

    /// Replays an existing log, then appends to it.
    pub fn with_log(mut self, path: impl AsRef<Path>) -> crate::Result<Self> {
        let path: PathBuf = path.as_ref().into();
        let state = self.state.get_mut().expect("fresh mutex");
        if path.exists() {
            for (n, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: LogEvent =
                    serde_json::from_str(&line).map_err(|e| crate::Error::Transcript {
                        line: n + 1,
                        message: e.to_string(),
                    })?;
                state.apply(event);
            }
        }
        state.log = Some(OpenOptions::new().create(true).append(true).open(&path)?);
        Ok(self)
    }

    pub fn lock_seconds(&self) -> u64 {
        self.lock_seconds
    }

    pub fn sessions(&self) -> impl Iterator<Item = &SessionSpec> {
        self.sessions.values()
    }

    fn session(&self, id: &str) -> AnnotationResult<&SessionSpec> {
        self.sessions.get(id).ok_or_else(|| {
            AnnotationError::new(ErrorCode::UnknownSession, format!("no session `{id}`"))
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn task_view(&self, spec: &SessionSpec, task_id: &str, served: &Served) -> AnnotationTask {
        let seg = &spec.segments[served.position];
        AnnotationTask {
            task_id: task_id.into(),
            session_id: spec.session_id.clone(),
            annotator_id: served.annotator_id.clone(),
            variant: spec.variant,
            position: served.position,
            total: spec.segments.len(),
            topic: seg.bundle.topic.clone(),
            prior_summary: seg.bundle.prior.text(),
            window: seg.bundle.window.clone(),
            targets: seg.targets.clone(),
            bundle: seg.bundle.clone(),
            served_at: served.served_at,
        }
    }

    /// Serves the annotator's next incomplete segment, or `position` when
    /// given. Repeated calls return the same task and original timestamp.
    pub fn serve_task(
        &self,
        session_id: &str,
        annotator: &str,
        position: Option<usize>,
    ) -> AnnotationResult<AnnotationTask> {
        let spec = self.session(session_id)?;
        if !spec.annotators.iter().any(|a| a == annotator) {
            return Err(AnnotationError::new(
                ErrorCode::NotAssigned,
                format!("annotator is not assigned to session `{session_id}`"),
            ));
        }
        let mut state = self.lock();
        let next = (0..spec.segments.len()).find(|&p| {
            state
                .by_slot
                .get(&(session_id.to_string(), annotator.to_string(), p))
                .is_none_or(|t| !state.is_complete(t))
        });
        let position = match (position, next) {
            (Some(p), _) if p >= spec.segments.len() => {
                return Err(AnnotationError::new(
                    ErrorCode::OutOfOrder,
                    format!(
                        "session has {} segments, asked for {p}",
                        spec.segments.len()
                    ),
                ))
            }
            (Some(p), Some(n)) if p > n => {
                return Err(AnnotationError::new(
                    ErrorCode::OutOfOrder,
                    format!("segment {p} requested while segment {n} is incomplete"),
                ))
            }
            (Some(p), _) => p,
            (None, Some(n)) => n,
            (None, None) => {
                return Err(AnnotationError::new(
                    ErrorCode::SessionComplete,
                    "every segment has been rated",
                ))
            }
        };
        let slot = (session_id.to_string(), annotator.to_string(), position);
        if let Some(task_id) = state.by_slot.get(&slot).cloned() {
            let served = state.tasks[&task_id].clone();
            return Ok(self.task_view(spec, &task_id, &served));
        }
        let task_id = format!("t{:06}", state.tasks.len() + 1);
        let served_at = self.clock.now();
        state.append(LogEvent::Served {
            task_id: task_id.clone(),
            session_id: session_id.into(),
            annotator_id: annotator.into(),
            position,
            served_at,
        })?;
        let served = state.tasks[&task_id].clone();
        Ok(self.task_view(spec, &task_id, &served))
    }

    /// Validates and stores a complete score set for a served task. A
    /// resubmission is stored as a new version.
    pub fn submit_ratings(
        &self,
        task_id: &str,
        annotator: &str,
        scores: &[ScoreInput],
    ) -> AnnotationResult<Receipt> {
        let mut state = self.lock();
        let served = state.tasks.get(task_id).cloned().ok_or_else(|| {
            AnnotationError::new(ErrorCode::UnknownTask, format!("no task `{task_id}`"))
        })?;
        if served.annotator_id != annotator {
            return Err(AnnotationError::new(
                ErrorCode::NotServed,
                format!("task `{task_id}` was not served to this annotator"),
            ));
        }
        let spec = self.session(&served.session_id)?;
        let version = state.latest_version(task_id) + 1;
        let now = self.clock.now();
        let elapsed = now.saturating_sub(served.served_at);
        if version == 1 && elapsed < self.lock_seconds {
            let left = self.lock_seconds - elapsed;
            return Err(AnnotationError {
                code: ErrorCode::LockActive,
                message: format!("ratings unlock {left}s from now"),
                retry_after: Some(left),
            });
        }
        let seg = &spec.segments[served.position];
        let parsed = validate_scores(spec.variant, &seg.bundle.targets, scores)?;
        for (utterance_index, s) in parsed {
            state.append(LogEvent::Rated(SubmittedRating {
                task_id: task_id.into(),
                annotator_id: annotator.into(),
                utterance_index,
                scores: s,
                version,
                submitted_at: now,
            }))?;
        }
        let session_complete = (0..spec.segments.len()).all(|p| {
            state
                .by_slot
                .get(&(served.session_id.clone(), annotator.to_string(), p))
                .is_some_and(|t| state.is_complete(t))
        });
        Ok(Receipt {
            task_id: task_id.into(),
            version,
            accepted: scores.len(),
            session_complete,
        })
    }

    /// Every stored rating, versions included, in arrival order.
    pub fn history(&self) -> Vec<SubmittedRating> {
        self.lock().ratings.clone()
    }

    fn completed_annotators(&self, state: &State, spec: &SessionSpec) -> Vec<String> {
        spec.annotators
            .iter()
            .filter(|a| {
                (0..spec.segments.len()).all(|p| {
                    state
                        .by_slot
                        .get(&(spec.session_id.clone(), a.to_string(), p))
                        .is_some_and(|t| state.is_complete(t))
                })
            })
            .cloned()
            .collect()
    }

    fn latest(state: &State) -> BTreeMap<(String, usize), &SubmittedRating> {
        let mut out: BTreeMap<(String, usize), &SubmittedRating> = BTreeMap::new();
        for r in &state.ratings {
            let key = (r.task_id.clone(), r.utterance_index);
            if out.get(&key).is_none_or(|o| o.version < r.version) {
                out.insert(key, r);
            }
        }
        out
    }

    /// Quality control over annotators who finished the session. Items are
    /// (utterance, dimension) pairs.
    pub fn session_agreement(&self, session_id: &str) -> AnnotationResult<SessionAgreement> {
        let spec = self.session(session_id)?;
        let state = self.lock();
        let completed = self.completed_annotators(&state, spec);
        if completed.len() < 2 {
            return Err(AnnotationError::new(
                ErrorCode::InsufficientAnnotators,
                format!("{} annotator(s) completed, need two", completed.len()),
            ));
        }
        let mut ratings = SessionRatings::new();
        for r in Self::latest(&state).into_values() {
            let served = &state.tasks[&r.task_id];
            if served.session_id != session_id || !completed.contains(&r.annotator_id) {
                continue;
            }
            let row = ratings.entry(r.annotator_id.clone()).or_default();
            for &d in spec.variant.dimensions() {
                if let Some(l) = r.scores.get(d) {
                    row.insert(format!("{}:{}", r.utterance_index, d.as_str()), l.get());
                }
            }
        }
        let report = quality_control(&ratings)
            .map_err(|e| AnnotationError::new(ErrorCode::InsufficientAnnotators, e.to_string()))?;
        let directive = match (report.status, report.dropped.first()) {
            (_, Some(a)) => Some(Directive::Drop {
                annotator: a.clone(),
            }),
            (QcStatus::NeedsThird | QcStatus::Unusable, None) => Some(Directive::RecruitThird),
            (QcStatus::Accepted, None) => None,
        };
        Ok(SessionAgreement {
            session_id: session_id.into(),
            completed,
            report,
            directive,
        })
    }

    /// Latest ratings of annotators who completed their sessions, as human
    /// rating records.
    pub fn export_records(&self) -> Vec<RatingRecord> {
        let state = self.lock();
        let done: BTreeMap<&str, Vec<String>> = self
            .sessions
            .values()
            .map(|s| (s.session_id.as_str(), self.completed_annotators(&state, s)))
            .collect();
        let mut out: Vec<RatingRecord> = Self::latest(&state)
            .into_values()
            .filter_map(|r| {
                let served = &state.tasks[&r.task_id];
                if !done
                    .get(served.session_id.as_str())?
                    .contains(&r.annotator_id)
                {
                    return None;
                }
                let bundle = &self.sessions[&served.session_id].segments[served.position].bundle;
                Some(RatingRecord {
                    episode_id: bundle.episode_id.clone(),
                    segment_index: bundle.segment_index,
                    utterance_index: r.utterance_index,
                    source_id: r.annotator_id.clone(),
                    condition: RatingCondition::Human,
                    scores: r.scores,
                })
            })
            .collect();
        out.sort_by_key(|a| a.key());
        out
    }
}

fn validate_scores(
    variant: TaskVariant,
    targets: &[usize],
    scores: &[ScoreInput],
) -> AnnotationResult<Vec<(usize, Scores)>> {
    let want: BTreeSet<usize> = targets.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let mut extra = Vec::new();
    for s in scores {
        if !want.contains(&s.utterance_index) || !seen.insert(s.utterance_index) {
            extra.push(s.utterance_index);
        }
    }
    if !extra.is_empty() {
        return Err(AnnotationError::new(
            ErrorCode::InvalidTargets,
            format!("unknown or repeated targets {extra:?}"),
        ));
    }
    let missing: Vec<usize> = want.difference(&seen).copied().collect();
    if !missing.is_empty() {
        return Err(AnnotationError::new(
            ErrorCode::MissingTargets,
            format!("no scores for targets {missing:?}"),
        ));
    }
    let dims = variant.dimensions();
    let mut out = Vec::with_capacity(scores.len());
    for s in scores {
        let stray: Vec<&str> = Dimension::ALL
            .iter()
            .filter(|d| !dims.contains(d) && s.get(**d).is_some())
            .map(|d| d.as_str())
            .collect();
        let absent: Vec<&str> = dims
            .iter()
            .filter(|d| s.get(**d).is_none())
            .map(|d| d.as_str())
            .collect();
        if !stray.is_empty() || !absent.is_empty() {
            return Err(AnnotationError::new(
                ErrorCode::InvalidScores,
                format!(
                    "utterance {}: unexpected {stray:?}, missing {absent:?}",
                    s.utterance_index
                ),
            ));
        }
        let mut levels = BTreeMap::new();
        for &d in dims {
            let v = s.get(d).expect("checked above");
            let l = Level::new(v).map_err(|_| {
                AnnotationError::new(
                    ErrorCode::OutOfRange,
                    format!(
                        "utterance {}: {} = {v} is outside 1..4",
                        s.utterance_index,
                        d.as_str()
                    ),
                )
            })?;
            levels.insert(d, l);
        }
        let scores = match variant {
            TaskVariant::InfoOnly => Scores::info(levels[&Dimension::Cig]),
            TaskVariant::ThreeAspects => Scores::mix(
                levels[&Dimension::Novelty],
                levels[&Dimension::Relevance],
                levels[&Dimension::ImplicationScope],
            ),
        };
        out.push((s.utterance_index, scores));
    }
    out.sort_by_key(|(i, _)| *i);
    Ok(out)
}

/// A calibration item shown in the tutorial or used for prescreening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationItem {
    pub id: String,
    pub prior: String,
    pub utterance: String,
    pub expected_cig: u8,
    pub explanation: String,
}

pub fn calibration_items() -> Vec<CalibrationItem> {
    let item = |id: &str, prior: &str, utterance: &str, expected_cig: u8, explanation: &str| {
        CalibrationItem {
            id: id.into(),
            prior: prior.into(),
            utterance: utterance.into(),
            expected_cig,
            explanation: explanation.into(),
        }
    };
    vec![
        item(
            "c1",
            "The panel has agreed that the town library needs longer opening hours.",
            "Yes, longer hours at the library, like we said.",
            1,
            "Restates a point already settled; nothing changes for the listener.",
        ),
        item(
            "c2",
            "The panel has agreed that the town library needs longer opening hours.",
            "Evening staff would cost roughly forty thousand a year, which the current budget cannot cover.",
            3,
            "Adds a concrete cost and a constraint the discussion had not considered.",
        ),
        item(
            "c3",
            "Speakers disagree about whether a congestion charge would help the high street.",
            "I had a sandwich before coming here.",
            1,
            "Unrelated to the topic under discussion.",
        ),
        item(
            "c4",
            "Speakers disagree about whether a congestion charge would help the high street.",
            "When the neighbouring city introduced one, footfall fell for a year and then rose above the old level, so the short-term numbers both sides quote are misleading.",
            4,
            "New evidence that reframes the whole disagreement.",
        ),
        item(
            "c5",
            "The group is discussing whether school uniforms reduce bullying.",
            "Some parents also say uniforms save them money.",
            2,
            "New but minor and only loosely tied to the question of bullying.",
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrescreenAnswer {
    pub id: String,
    pub cig: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrescreenResult {
    pub correct: usize,
    pub total: usize,
    pub score: f64,
    pub passed: bool,
}

/// An answer counts as correct within `tolerance` levels of the expected one.
/// Unanswered items count as wrong.
pub fn grade_prescreen(
    answers: &[PrescreenAnswer],
    pass_threshold: f64,
    tolerance: u8,
) -> PrescreenResult {
    let items = calibration_items();
    let given: BTreeMap<&str, u8> = answers.iter().map(|a| (a.id.as_str(), a.cig)).collect();
    let correct = items
        .iter()
        .filter(|i| {
            given
                .get(i.id.as_str())
                .is_some_and(|&g| g.abs_diff(i.expected_cig) <= tolerance)
        })
        .count();
    let score = correct as f64 / items.len() as f64;
    PrescreenResult {
        correct,
        total: items.len(),
        score,
        passed: score >= pass_threshold,
    }
}
