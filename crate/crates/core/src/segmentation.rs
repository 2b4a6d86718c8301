//! Sub-topic segmentation of the discussion phase: repeated model proposals,
//! weighted breakpoint voting, constrained peak selection and greedy merging,
//! plus scoring of segments for annotation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::gateway::schema::{self, SegmentationPayload};
use crate::gateway::{CachePolicy, Gateway};
use crate::prompts::{self, ModelRoute};
use crate::transcript::{Episode, Interval, Segment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub runs: usize,
    pub min_surviving_runs: usize,
    pub neighbor_weight: f64,
    pub peak_threshold: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub target_words: [usize; 2],
    pub max_turns: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            runs: 5,
            min_surviving_runs: 3,
            neighbor_weight: 0.5,
            peak_threshold: 0.4,
            min_len: 3,
            max_len: 20,
            target_words: [450, 750],
            max_turns: 20,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("segmentation.runs must be positive"));
        }
        if self.min_len == 0 {
            return Err(Error::config("segmentation.min_len must be at least 1"));
        }
        if self.max_len < 2 * self.min_len {
            return Err(Error::config(
                "segmentation.max_len must be at least twice min_len",
            ));
        }
        if self.target_words[0] >= self.target_words[1] {
            return Err(Error::config(
                "segmentation.target_words must be an increasing pair",
            ));
        }
        if !(0.0..=1.0).contains(&self.peak_threshold) {
            return Err(Error::config(
                "segmentation.peak_threshold must lie in [0, 1]",
            ));
        }
        Ok(())
    }

    /// Word-count deviation from the target range.
    pub fn deviation(&self, words: usize) -> usize {
        let [low, high] = self.target_words;
        low.saturating_sub(words) + words.saturating_sub(high)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposedInterval {
    pub segment_index: usize,
    pub interval: Interval,
    pub subtopic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentProposal {
    pub run_index: usize,
    pub intervals: Vec<ProposedInterval>,
}

impl SegmentProposal {
    pub fn starts(&self) -> impl Iterator<Item = usize> + '_ {
        self.intervals.iter().map(|iv| iv.interval.start)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscardedRun {
    pub run_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub proposals: Vec<SegmentProposal>,
    pub discarded: Vec<DiscardedRun>,
}

fn check_proposal(
    payload: &SegmentationPayload,
    discussion: Interval,
) -> std::result::Result<Vec<ProposedInterval>, String> {
    let mut intervals: Vec<ProposedInterval> = payload
        .segments
        .iter()
        .map(|s| ProposedInterval {
            segment_index: s.segment_index,
            interval: Interval::new(s.utterances_interval[0], s.utterances_interval[1]),
            subtopic: s.segment_subtopic.clone(),
        })
        .collect();
    intervals.sort_by_key(|iv| iv.interval.start);
    let mut prev_end: Option<usize> = None;
    for iv in &intervals {
        if iv.interval.start < discussion.start || iv.interval.end > discussion.end {
            return Err(format!(
                "interval [{}, {}] outside discussion [{}, {}]",
                iv.interval.start, iv.interval.end, discussion.start, discussion.end
            ));
        }
        if prev_end.is_some_and(|e| iv.interval.start <= e) {
            return Err(format!(
                "interval [{}, {}] overlaps its predecessor",
                iv.interval.start, iv.interval.end
            ));
        }
        prev_end = Some(iv.interval.end);
    }
    Ok(intervals)
}

/// Runs the segmenter `config.runs` times with a different seed per run.
/// Runs whose response fails validation or leaves the discussion range are
/// discarded; fewer than `min_surviving_runs` survivors is an error.
pub fn propose_segments(
    episode: &Episode,
    config: &SegmentationConfig,
    gateway: &Gateway,
    route: &ModelRoute,
    policy: CachePolicy,
    seed: u64,
) -> Result<ProposalSet> {
    let discussion = episode.discussion();
    let utterances: Vec<_> = episode
        .utterances_in(discussion)
        .iter()
        .map(|u| json!({"index": u.index, "speaker": episode.speaker_of(u).display_name, "text": u.text}))
        .collect();
    let listing = episode
        .utterances_in(discussion)
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
        prompts::SEGMENTATION,
        &[
            ("topic", episode.topic.clone()),
            ("start", discussion.start.to_string()),
            ("end", discussion.end.to_string()),
            ("target_low", config.target_words[0].to_string()),
            ("target_high", config.target_words[1].to_string()),
            ("utterances", listing),
        ],
    );

    let outcomes: Vec<Result<std::result::Result<SegmentProposal, String>>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..config.runs)
                .map(|run| {
                    let inputs = json!({
                        "topic": episode.topic,
                        "discussion": [discussion.start, discussion.end],
                        "utterances": utterances,
                        "run_index": run,
                        "target_words": config.target_words,
                    });
                    let mut request = route.request(
                        schema::SEGMENTATION,
                        prompt.clone(),
                        inputs,
                        seed.wrapping_add(run as u64),
                    );
                    request.label = Some("segmentation".into());
                    scope.spawn(move || {
                        match gateway.complete_as::<SegmentationPayload>(&request, policy) {
                            Ok(payload) => {
                                Ok(check_proposal(&payload, discussion).map(|intervals| {
                                    SegmentProposal {
                                        run_index: run,
                                        intervals,
                                    }
                                }))
                            }
                            Err(Error::SchemaInvalid { message, .. }) => {
                                Ok(Err(format!("schema violation: {message}")))
                            }
                            Err(e) => Err(e),
                        }
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("segmentation worker panicked"))
                .collect()
        });

    let mut set = ProposalSet {
        proposals: Vec::new(),
        discarded: Vec::new(),
    };
    for (run, outcome) in outcomes.into_iter().enumerate() {
        match outcome? {
            Ok(p) => set.proposals.push(p),
            Err(reason) => {
                tracing::warn!(episode = %episode.id, run, %reason, "segmentation run discarded");
                set.discarded.push(DiscardedRun {
                    run_index: run,
                    reason,
                });
            }
        }
    }
    if set.proposals.len() < config.min_surviving_runs {
        return Err(Error::validation(format!(
            "only {} of {} segmentation runs survived for episode {} (need {})",
            set.proposals.len(),
            config.runs,
            episode.id,
            config.min_surviving_runs
        )));
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakpointProfile {
    pub discussion: Interval,
    pub runs: usize,
    pub votes: BTreeMap<usize, f64>,
    pub normalized_confidence: BTreeMap<usize, f64>,
}

impl BreakpointProfile {
    pub fn confidence(&self, index: usize) -> f64 {
        self.normalized_confidence
            .get(&index)
            .copied()
            .unwrap_or(0.0)
    }
}

/// Each proposed segment start casts 1.0 on itself and `neighbor_weight` on
/// each neighbour inside the discussion range. Within one run an index takes
/// the largest weight it receives, so normalized confidence stays in [0, 1].
pub fn vote_breakpoints(
    proposals: &[SegmentProposal],
    discussion: Interval,
    neighbor_weight: f64,
) -> BreakpointProfile {
    let mut votes: BTreeMap<usize, f64> = BTreeMap::new();
    for p in proposals {
        let mut run_votes: BTreeMap<usize, f64> = BTreeMap::new();
        let mut cast = |idx: usize, w: f64| {
            if discussion.contains(idx) {
                let slot = run_votes.entry(idx).or_insert(0.0);
                *slot = slot.max(w);
            }
        };
        for b in p.starts() {
            cast(b, 1.0);
            if b > 0 {
                cast(b - 1, neighbor_weight);
            }
            cast(b + 1, neighbor_weight);
        }
        for (idx, w) in run_votes {
            *votes.entry(idx).or_insert(0.0) += w;
        }
    }
    let runs = proposals.len();
    let normalized_confidence = votes
        .iter()
        .map(|(&i, &v)| (i, if runs == 0 { 0.0 } else { v / runs as f64 }))
        .collect();
    BreakpointProfile {
        discussion,
        runs,
        votes,
        normalized_confidence,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakpointSelection {
    /// Segment starts after the discussion start, ascending.
    pub cuts: Vec<usize>,
    pub peaks: Vec<usize>,
    pub fallback: Vec<usize>,
}

/// Local maxima strictly above the threshold. On plateaus the lowest index is
/// the peak: strictly greater than the left neighbour, at least the right.
pub fn threshold_peaks(profile: &BreakpointProfile, threshold: f64) -> Vec<usize> {
    let d = profile.discussion;
    ((d.start + 1)..=d.end)
        .filter(|&i| {
            let c = profile.confidence(i);
            c > threshold
                && c > profile.confidence(i - 1)
                && (i == d.end || c >= profile.confidence(i + 1))
        })
        .collect()
}

pub fn select_breakpoints(
    profile: &BreakpointProfile,
    config: &SegmentationConfig,
) -> BreakpointSelection {
    let d = profile.discussion;
    let min_len = config.min_len;
    let mut candidates = threshold_peaks(profile, config.peak_threshold);
    candidates.sort_by(|a, b| {
        profile
            .confidence(*b)
            .total_cmp(&profile.confidence(*a))
            .then(a.cmp(b))
    });

    let mut peaks: Vec<usize> = Vec::new();
    for c in candidates {
        let fits_ends = c - d.start >= min_len && d.end + 1 - c >= min_len;
        if fits_ends && peaks.iter().all(|&p| p.abs_diff(c) >= min_len) {
            peaks.push(c);
        }
    }
    peaks.sort_unstable();

    let mut cuts = peaks.clone();
    let mut fallback = Vec::new();
    loop {
        let bounds = segment_bounds(d, &cuts);
        let Some(long) = bounds.iter().find(|iv| iv.len() > config.max_len) else {
            break;
        };
        let (s, e) = (long.start, long.end);
        let best = ((s + min_len)..=(e + 1 - min_len))
            .min_by(|&a, &b| {
                profile
                    .confidence(b)
                    .total_cmp(&profile.confidence(a))
                    .then(
                        (2 * a)
                            .abs_diff(s + e + 1)
                            .cmp(&(2 * b).abs_diff(s + e + 1)),
                    )
                    .then(a.cmp(&b))
            })
            .expect("max_len >= 2 * min_len leaves a valid cut");
        fallback.push(best);
        cuts.push(best);
        cuts.sort_unstable();
    }
    fallback.sort_unstable();
    BreakpointSelection {
        cuts,
        peaks,
        fallback,
    }
}

/// Intervals tiling the discussion given ascending cut positions.
pub fn segment_bounds(discussion: Interval, cuts: &[usize]) -> Vec<Interval> {
    let mut starts = vec![discussion.start];
    starts.extend(cuts.iter().copied());
    starts
        .iter()
        .enumerate()
        .map(|(k, &s)| Interval::new(s, starts.get(k + 1).map_or(discussion.end, |n| n - 1)))
        .collect()
}

pub fn segments_from_cuts(profile: &BreakpointProfile, cuts: &[usize]) -> Vec<Segment> {
    segment_bounds(profile.discussion, cuts)
        .into_iter()
        .enumerate()
        .map(|(k, interval)| Segment {
            segment_index: k,
            interval,
            subtopic: String::new(),
            boundary_confidence: profile.confidence(interval.start),
        })
        .collect()
}

fn segment_words(episode: &Episode, interval: Interval) -> usize {
    episode
        .utterances_in(interval)
        .iter()
        .map(|u| u.token_count)
        .sum()
}

/// Greedy left-to-right merge of adjacent segments whenever merging strictly
/// reduces the summed word-count deviation and the merged segment stays within
/// `min(max_turns, max_len)` utterances.
pub fn merge_segments(
    segments: &[Segment],
    episode: &Episode,
    config: &SegmentationConfig,
) -> Vec<Segment> {
    let cap = config.max_turns.min(config.max_len);
    let mut out: Vec<Segment> = Vec::new();
    let mut iter = segments.iter().cloned();
    let Some(mut cur) = iter.next() else {
        return out;
    };
    for next in iter {
        let merged = Interval::new(cur.interval.start, next.interval.end);
        let separate = config.deviation(segment_words(episode, cur.interval))
            + config.deviation(segment_words(episode, next.interval));
        if config.deviation(segment_words(episode, merged)) < separate && merged.len() <= cap {
            cur.interval = merged;
        } else {
            out.push(cur);
            cur = next;
        }
    }
    out.push(cur);
    for (k, s) in out.iter_mut().enumerate() {
        s.segment_index = k;
    }
    out
}

/// Labels each segment with the subtopic of the proposed interval that
/// overlaps it most (earlier runs, then earlier intervals, win ties).
pub fn label_segments(segments: &mut [Segment], proposals: &[SegmentProposal]) {
    for seg in segments.iter_mut() {
        let mut best: Option<(usize, &str)> = None;
        for p in proposals {
            for iv in &p.intervals {
                let lo = seg.interval.start.max(iv.interval.start);
                let hi = seg.interval.end.min(iv.interval.end);
                let overlap = if lo <= hi { hi - lo + 1 } else { 0 };
                if overlap > 0 && best.is_none_or(|(b, _)| overlap > b) {
                    best = Some((overlap, iv.subtopic.as_str()));
                }
            }
        }
        seg.subtopic = best.map(|(_, s)| s.to_string()).unwrap_or_default();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub proposals: ProposalSet,
    pub profile: BreakpointProfile,
    pub selection: BreakpointSelection,
    pub segments: Vec<Segment>,
}

pub fn segment_episode(
    episode: &Episode,
    config: &SegmentationConfig,
    gateway: &Gateway,
    route: &ModelRoute,
    policy: CachePolicy,
    seed: u64,
) -> Result<SegmentationResult> {
    config.validate()?;
    let proposals = propose_segments(episode, config, gateway, route, policy, seed)?;
    Ok(segment_from_proposals(episode, config, proposals))
}

/// The deterministic part of segmentation, downstream of the proposals.
pub fn segment_from_proposals(
    episode: &Episode,
    config: &SegmentationConfig,
    proposals: ProposalSet,
) -> SegmentationResult {
    let profile = vote_breakpoints(
        &proposals.proposals,
        episode.discussion(),
        config.neighbor_weight,
    );
    let selection = select_breakpoints(&profile, config);
    let raw = segments_from_cuts(&profile, &selection.cuts);
    let mut segments = merge_segments(&raw, episode, config);
    label_segments(&mut segments, &proposals.proposals);
    SegmentationResult {
        proposals,
        profile,
        selection,
        segments,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionParams {
    pub target_utterances: usize,
    pub reading_budget_minutes: f64,
    pub words_per_minute: f64,
    pub summary_words: usize,
    pub max_window: usize,
    /// Weights for (utterance deviation, reading deviation, boundary
    /// confidence, context benefit).
    pub weights: [f64; 4],
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            target_utterances: 6,
            reading_budget_minutes: 5.0,
            words_per_minute: 200.0,
            summary_words: 250,
            max_window: 5,
            weights: [1.0, 1.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFeatures {
    pub segment_index: usize,
    pub non_skipped: usize,
    pub utterance_deviation: f64,
    pub reading_minutes: f64,
    pub reading_deviation: f64,
    pub boundary_confidence: f64,
    pub context_benefit: f64,
    pub score: f64,
}

/// Reading time of segment text, the prior summary, and the nearest
/// preceding turns (at most `max_window`) that still fit the budget.
pub fn reading_minutes(episode: &Episode, segment: &Segment, params: &SelectionParams) -> f64 {
    let seg_words: usize = episode
        .utterances_in(segment.interval)
        .iter()
        .map(|u| u.token_count)
        .sum();
    let mut total = (seg_words + params.summary_words) as f64 / params.words_per_minute;
    for u in episode.utterances[..segment.interval.start]
        .iter()
        .rev()
        .take(params.max_window)
    {
        let add = u.token_count as f64 / params.words_per_minute;
        if total + add > params.reading_budget_minutes {
            break;
        }
        total += add;
    }
    total
}

fn zscores(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    xs.iter()
        .map(|x| if sd > 0.0 { (x - mean) / sd } else { 0.0 })
        .collect()
}

pub fn segment_features(
    episode: &Episode,
    segments: &[Segment],
    context_benefit: &BTreeMap<usize, f64>,
    params: &SelectionParams,
) -> Vec<SegmentFeatures> {
    let mut feats: Vec<SegmentFeatures> = segments
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let non_skipped = episode
                .utterances_in(s.interval)
                .iter()
                .filter(|u| !u.skipped)
                .count();
            let minutes = reading_minutes(episode, s, params);
            let next_conf = segments.get(k + 1).map(|n| n.boundary_confidence);
            let boundary = match next_conf {
                Some(c) => (s.boundary_confidence + c) / 2.0,
                None => s.boundary_confidence,
            };
            SegmentFeatures {
                segment_index: s.segment_index,
                non_skipped,
                utterance_deviation: (non_skipped as f64 - params.target_utterances as f64).abs(),
                reading_minutes: minutes,
                reading_deviation: (minutes - params.reading_budget_minutes).abs(),
                boundary_confidence: boundary,
                context_benefit: context_benefit
                    .get(&s.segment_index)
                    .copied()
                    .unwrap_or(0.0),
                score: 0.0,
            }
        })
        .collect();
    if feats.is_empty() {
        return feats;
    }
    let column = |f: fn(&SegmentFeatures) -> f64| zscores(&feats.iter().map(f).collect::<Vec<_>>());
    let z = [
        column(|f| f.utterance_deviation),
        column(|f| f.reading_deviation),
        column(|f| f.boundary_confidence),
        column(|f| f.context_benefit),
    ];
    let w = params.weights;
    for (i, f) in feats.iter_mut().enumerate() {
        f.score = -w[0] * z[0][i] - w[1] * z[1][i] + w[2] * z[2][i] + w[3] * z[3][i];
    }
    feats
}

/// The `k` best segments by score, best first; ties go to the earlier segment.
pub fn select_annotation_segments(
    episode: &Episode,
    segments: &[Segment],
    k: usize,
    context_benefit: &BTreeMap<usize, f64>,
    params: &SelectionParams,
) -> Result<Vec<Segment>> {
    if k > segments.len() {
        return Err(Error::validation(format!(
            "asked for {k} annotation segments but only {} exist",
            segments.len()
        )));
    }
    let feats = segment_features(episode, segments, context_benefit, params);
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| feats[b].score.total_cmp(&feats[a].score).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| segments[i].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayConfig, Reply, ScriptedProvider};
    use crate::transcript::parse_episode;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn proposal(run: usize, starts: &[usize], end: usize) -> SegmentProposal {
        let intervals = starts
            .iter()
            .enumerate()
            .map(|(k, &s)| ProposedInterval {
                segment_index: k,
                interval: Interval::new(s, starts.get(k + 1).map_or(end, |n| n - 1)),
                subtopic: format!("r{run}s{k}"),
            })
            .collect();
        SegmentProposal {
            run_index: run,
            intervals,
        }
    }

    /// Independent oracle: for each index and run, the largest weight any start
    /// of that run assigns to it.
    fn brute_votes(proposals: &[SegmentProposal], d: Interval, w: f64) -> BTreeMap<usize, f64> {
        let mut out = BTreeMap::new();
        for i in d.range() {
            let mut total = 0.0;
            let mut touched = false;
            for p in proposals {
                let best = p
                    .starts()
                    .map(|b| match i.abs_diff(b) {
                        0 => 1.0,
                        1 => w,
                        _ => 0.0,
                    })
                    .fold(0.0, f64::max);
                if p.starts().any(|b| i.abs_diff(b) <= 1) {
                    touched = true;
                }
                total += best;
            }
            if touched {
                out.insert(i, total);
            }
        }
        out
    }

    fn episode(n: usize, words: usize) -> Episode {
        let mut lines = vec![r#"{"id":"e","topic":"t","corpus_tag":"x"}"#.to_string()];
        let text = vec!["word"; words].join(" ");
        for i in 0..n {
            lines.push(format!(
                r#"{{"index":{i},"speaker_id":"s{}","speaker_name":"S","role":"participant","text":"{text}","phase":"discussion"}}"#,
                i % 3
            ));
        }
        parse_episode(&lines.join("\n")).unwrap()
    }

    #[test]
    fn three_run_vote_example() {
        let d = Interval::new(0, 20);
        let ps = [
            proposal(0, &[0, 5], 20),
            proposal(1, &[0, 5], 20),
            proposal(2, &[0, 6], 20),
        ];
        let prof = vote_breakpoints(&ps, d, 0.5);
        assert_eq!(prof.votes[&4], 1.0);
        assert_eq!(prof.votes[&5], 2.5);
        assert_eq!(prof.votes[&6], 2.0);
        assert_eq!(prof.votes[&7], 0.5);
        assert!((prof.normalized_confidence[&5] - 2.5 / 3.0).abs() < 1e-15);
        assert_eq!(prof.votes, brute_votes(&ps, d, 0.5));
    }

    #[test]
    fn single_interior_start_and_clipping() {
        let d = Interval::new(3, 30);
        let prof = vote_breakpoints(&[proposal(0, &[3, 10], 30)], d, 0.5);
        assert_eq!(prof.votes.get(&9), Some(&0.5));
        assert_eq!(prof.votes.get(&10), Some(&1.0));
        assert_eq!(prof.votes.get(&11), Some(&0.5));
        assert_eq!(prof.votes.get(&2), None);
        let zero = vote_breakpoints(&[proposal(0, &[0], 10)], Interval::new(0, 10), 0.5);
        assert_eq!(zero.votes.keys().copied().collect::<Vec<_>>(), [0, 1]);
    }

    fn profile_from(d: Interval, conf: &[(usize, f64)]) -> BreakpointProfile {
        let normalized_confidence: BTreeMap<usize, f64> = conf.iter().copied().collect();
        BreakpointProfile {
            discussion: d,
            runs: 1,
            votes: normalized_confidence.clone(),
            normalized_confidence,
        }
    }

    #[test]
    fn single_peak_selected() {
        let cfg = SegmentationConfig {
            peak_threshold: 0.5,
            min_len: 2,
            max_len: 30,
            ..Default::default()
        };
        let prof = profile_from(Interval::new(0, 20), &[(9, 0.3), (10, 0.9), (11, 0.3)]);
        assert_eq!(select_breakpoints(&prof, &cfg).cuts, [10]);
    }

    #[test]
    fn flat_profile_falls_back_to_max_len() {
        let cfg = SegmentationConfig {
            min_len: 3,
            max_len: 20,
            ..Default::default()
        };
        let prof = profile_from(Interval::new(0, 49), &[]);
        let sel = select_breakpoints(&prof, &cfg);
        assert!(sel.peaks.is_empty());
        for iv in segment_bounds(prof.discussion, &sel.cuts) {
            assert!(iv.len() <= 20 && iv.len() >= 3, "{iv:?}");
        }
    }

    #[test]
    fn plateau_tie_goes_to_lower_index() {
        let cfg = SegmentationConfig {
            min_len: 2,
            max_len: 40,
            ..Default::default()
        };
        let prof = profile_from(
            Interval::new(0, 20),
            &[(9, 0.1), (10, 0.8), (11, 0.8), (12, 0.1)],
        );
        let a = select_breakpoints(&prof, &cfg);
        assert_eq!(a.cuts, [10]);
        assert_eq!(a, select_breakpoints(&prof, &cfg));
    }

    #[test]
    fn merge_examples() {
        let cfg = SegmentationConfig::default();
        assert_eq!(cfg.deviation(500), 0);
        assert_eq!(cfg.deviation(200), 250);
        assert_eq!(cfg.deviation(1200), 450);
        // 4 utterances of 50 words, then 6 of 50 words: 200 + 300 words.
        let ep = episode(10, 50);
        let segs = vec![
            Segment {
                segment_index: 0,
                interval: Interval::new(0, 3),
                subtopic: String::new(),
                boundary_confidence: 1.0,
            },
            Segment {
                segment_index: 1,
                interval: Interval::new(4, 9),
                subtopic: String::new(),
                boundary_confidence: 0.5,
            },
        ];
        let merged = merge_segments(&segs, &ep, &cfg);
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].interval, Interval::new(0, 9));

        let ep = episode(12, 100);
        let segs = vec![
            Segment {
                segment_index: 0,
                interval: Interval::new(0, 5),
                subtopic: String::new(),
                boundary_confidence: 1.0,
            },
            Segment {
                segment_index: 1,
                interval: Interval::new(6, 11),
                subtopic: String::new(),
                boundary_confidence: 0.5,
            },
        ];
        assert_eq!(merge_segments(&segs, &ep, &cfg), segs);
        assert_eq!(merge_segments(&segs[..1], &ep, &cfg), segs[..1]);
    }

    fn seg(i: usize, s: usize, e: usize, conf: f64) -> Segment {
        Segment {
            segment_index: i,
            interval: Interval::new(s, e),
            subtopic: String::new(),
            boundary_confidence: conf,
        }
    }

    #[test]
    fn context_benefit_decides_when_other_features_tie() {
        let ep = episode(18, 20);
        let segs = vec![seg(0, 0, 5, 0.5), seg(1, 6, 11, 0.5), seg(2, 12, 17, 0.5)];
        let params = SelectionParams {
            reading_budget_minutes: 100.0,
            max_window: 0,
            ..Default::default()
        };
        let benefit = BTreeMap::from([(0, 0.1), (1, 0.9), (2, 0.5)]);
        let picked = select_annotation_segments(&ep, &segs, 3, &benefit, &params).unwrap();
        assert_eq!(
            picked.iter().map(|s| s.segment_index).collect::<Vec<_>>(),
            [1, 2, 0]
        );
        assert!(select_annotation_segments(&ep, &segs, 4, &benefit, &params).is_err());
    }

    #[test]
    fn reading_penalty_flips_order() {
        // Segment 0: 6 turns of 20 words; segment 1: 6 turns of 120 words. With
        // a higher context benefit on segment 1 but a much longer read.
        let mut lines = vec![r#"{"id":"e","topic":"t","corpus_tag":"x"}"#.to_string()];
        for i in 0..12 {
            let w = if i < 6 { 20 } else { 120 };
            lines.push(format!(
                r#"{{"index":{i},"speaker_id":"s","speaker_name":"S","role":"participant","text":"{}","phase":"discussion"}}"#,
                vec!["word"; w].join(" ")
            ));
        }
        let ep = parse_episode(&lines.join("\n")).unwrap();
        let segs = vec![seg(0, 0, 5, 0.6), seg(1, 6, 11, 0.6)];
        let params = SelectionParams {
            reading_budget_minutes: 2.0,
            max_window: 0,
            summary_words: 250,
            ..Default::default()
        };
        let benefit = BTreeMap::from([(0, 0.2), (1, 0.3)]);

        // Hand scoring: minutes = (120+250)/200 = 1.85 and (720+250)/200 = 4.85;
        // deviations 0.15 and 2.85 -> z = -1, +1. Benefit z = -1, +1. Other
        // features are equal (z = 0). Scores: seg0 = +1 - 1 = 0, seg1 = -1 + 1 = 0.
        let f = segment_features(&ep, &segs, &benefit, &params);
        assert!((f[0].reading_minutes - 1.85).abs() < 1e-12);
        assert!((f[1].reading_minutes - 4.85).abs() < 1e-12);
        assert!(f[0].score.abs() < 1e-12 && f[1].score.abs() < 1e-12);

        // Doubling the reading weight flips the order toward segment 0.
        let heavy = SelectionParams {
            weights: [1.0, 2.0, 1.0, 1.0],
            ..params.clone()
        };
        let picked = select_annotation_segments(&ep, &segs, 1, &benefit, &heavy).unwrap();
        assert_eq!(picked[0].segment_index, 0);
        let light = SelectionParams {
            weights: [1.0, 0.5, 1.0, 1.0],
            ..params
        };
        let picked = select_annotation_segments(&ep, &segs, 1, &benefit, &light).unwrap();
        assert_eq!(picked[0].segment_index, 1);
    }

    fn ep_with_discussion(n: usize) -> Episode {
        let mut lines = vec![r#"{"id":"e","topic":"Transit","corpus_tag":"x"}"#.to_string()];
        lines.push(r#"{"index":0,"speaker_id":"m","speaker_name":"M","role":"moderator","text":"Welcome to the forum tonight.","phase":"introduction"}"#.into());
        for i in 1..=n {
            lines.push(format!(
                r#"{{"index":{i},"speaker_id":"s{}","speaker_name":"S","role":"participant","text":"Buses and trains need more funding now.","phase":"discussion"}}"#,
                i % 2
            ));
        }
        parse_episode(&lines.join("\n")).unwrap()
    }

    fn seg_reply(intervals: &[[usize; 2]]) -> Reply {
        let segs: Vec<_> = intervals
            .iter()
            .enumerate()
            .map(|(k, iv)| json!({"segment_index": k, "utterances_interval": iv, "segment_subtopic": "fares"}))
            .collect();
        Reply::json(json!({ "segments": segs }))
    }

    fn gateway_with(p: Arc<ScriptedProvider>) -> Gateway {
        Gateway::new(GatewayConfig {
            retries: 0,
            backoff: std::time::Duration::ZERO,
            max_in_flight: 5,
        })
        .with_chat("p", p)
    }

    #[test]
    fn identical_scripted_runs_give_identical_proposals() {
        let ep = ep_with_discussion(12);
        let p = Arc::new(ScriptedProvider::new().on(
            "segmentation",
            json!({}),
            vec![seg_reply(&[[1, 6], [7, 12]])],
        ));
        let gw = gateway_with(p.clone());
        let set = propose_segments(
            &ep,
            &SegmentationConfig::default(),
            &gw,
            &ModelRoute::new("p", "m"),
            CachePolicy::Off,
            0,
        )
        .unwrap();
        assert_eq!(set.proposals.len(), 5);
        assert!(set
            .proposals
            .windows(2)
            .all(|w| w[0].intervals == w[1].intervals));
        assert_eq!(p.calls("segmentation"), 5);
    }

    #[test]
    fn out_of_range_and_malformed_runs_are_discarded() {
        let ep = ep_with_discussion(12);
        let p = Arc::new(
            ScriptedProvider::new()
                .on(
                    "segmentation",
                    json!({"run_index": 1}),
                    vec![seg_reply(&[[0, 6], [7, 12]])],
                )
                .on(
                    "segmentation",
                    json!({"run_index": 3}),
                    vec![Reply::Text("{\"segments\": [{\"oops\": 1}]}".into())],
                )
                .on(
                    "segmentation",
                    json!({}),
                    vec![seg_reply(&[[1, 6], [7, 12]])],
                ),
        );
        let gw = gateway_with(p);
        let set = propose_segments(
            &ep,
            &SegmentationConfig::default(),
            &gw,
            &ModelRoute::new("p", "m"),
            CachePolicy::Off,
            0,
        )
        .unwrap();
        assert_eq!(set.proposals.len(), 3);
        assert_eq!(
            set.discarded
                .iter()
                .map(|d| d.run_index)
                .collect::<Vec<_>>(),
            [1, 3]
        );
        assert!(set.discarded[1].reason.starts_with("schema violation"));
        assert!(set.discarded[0].reason.contains("outside discussion"));
    }

    #[test]
    fn too_few_survivors_is_an_error() {
        let ep = ep_with_discussion(12);
        let p = Arc::new(ScriptedProvider::new().on(
            "segmentation",
            json!({}),
            vec![seg_reply(&[[0, 12]])],
        ));
        let gw = gateway_with(p);
        let err = propose_segments(
            &ep,
            &SegmentationConfig::default(),
            &gw,
            &ModelRoute::new("p", "m"),
            CachePolicy::Off,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    fn arb_case() -> impl Strategy<Value = (usize, Vec<Vec<usize>>, SegmentationConfig, Vec<usize>)>
    {
        (5usize..80, 1usize..4, 1usize..6, 1usize..8).prop_flat_map(|(n, min_len, runs, extra)| {
            let max_len = 2 * min_len + extra;
            let starts = prop::collection::vec(prop::collection::btree_set(1..n, 0..6), runs);
            let words = prop::collection::vec(1usize..200, n);
            (
                Just(n),
                starts,
                0.0f64..1.0,
                Just(min_len),
                Just(max_len),
                words,
            )
                .prop_map(move |(n, starts, thr, min_len, max_len, words)| {
                    let cfg = SegmentationConfig {
                        peak_threshold: thr,
                        min_len,
                        max_len,
                        max_turns: max_len,
                        ..Default::default()
                    };
                    let runs = starts
                        .into_iter()
                        .map(|s| std::iter::once(0).chain(s).collect())
                        .collect();
                    (n, runs, cfg, words)
                })
        })
    }

    fn word_episode(words: &[usize]) -> Episode {
        let mut lines = vec![r#"{"id":"e","topic":"t","corpus_tag":"x"}"#.to_string()];
        for (i, w) in words.iter().enumerate() {
            lines.push(format!(
                r#"{{"index":{i},"speaker_id":"s","speaker_name":"S","role":"participant","text":"{}","phase":"discussion"}}"#,
                vec!["w"; *w].join(" ")
            ));
        }
        parse_episode(&lines.join("\n")).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn voting_matches_oracle_and_tiles((n, runs, cfg, words) in arb_case()) {
            let d = Interval::new(0, n - 1);
            let proposals: Vec<SegmentProposal> = runs.iter().enumerate().map(|(r, s)| proposal(r, s, n - 1)).collect();
            let prof = vote_breakpoints(&proposals, d, 0.5);
            prop_assert_eq!(&prof.votes, &brute_votes(&proposals, d, 0.5));
            for v in prof.normalized_confidence.values() {
                prop_assert!((0.0..=1.0).contains(v));
            }
            let mut reversed = proposals.clone();
            reversed.reverse();
            prop_assert_eq!(&vote_breakpoints(&reversed, d, 0.5).votes, &prof.votes);

            let ep = word_episode(&words);
            let set = ProposalSet { proposals, discarded: vec![] };
            let result = segment_from_proposals(&ep, &cfg, set);
            let mut next = 0;
            for s in &result.segments {
                prop_assert_eq!(s.interval.start, next);
                prop_assert!(!s.interval.is_empty() && s.interval.len() <= cfg.max_len);
                next = s.interval.end + 1;
            }
            prop_assert_eq!(next, n);

            let higher = SegmentationConfig { peak_threshold: (cfg.peak_threshold + 0.2).min(1.0), ..cfg.clone() };
            prop_assert!(threshold_peaks(&prof, higher.peak_threshold).len() <= threshold_peaks(&prof, cfg.peak_threshold).len());
            let a = select_breakpoints(&prof, &cfg);
            let b = select_breakpoints(&prof, &higher);
            prop_assert!(b.peaks.iter().all(|p| a.peaks.contains(p)));
        }
    }
}
