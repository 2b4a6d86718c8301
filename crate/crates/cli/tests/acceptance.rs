//! Acceptance suite: one PASS/FAIL line per headline criterion, each with a
//! pinned tolerance and time budget. Exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::Value;

use cig_core::gateway::heuristic::HeuristicProvider;
use cig_core::gateway::schema::NliLabel;
use cig_core::gateway::{CachePolicy, Gateway, GatewayConfig, HashEmbedder};
use cig_core::memory::consolidate::{classify_relation, EpisodeMemory};
use cig_core::memory::policy::{decide_action, map_relation, select_target, Action, Candidate};
use cig_core::memory::{MemoryId, MemoryStore, Relation};
use cig_core::prompts::{Caller, ModelRoute};
use cig_core::proxies::{
    compute_lexical_features, compute_memory_dynamics, compute_surprisal_features, fit_tfidf,
    AspectPredictions, VocabState,
};
use cig_core::rating::{
    combine_aspects, run_aggregation_grid, AspectOp, ClaimOp, ClaimRating, Level, UtteranceKey,
};
use cig_core::segmentation::{
    segment_from_proposals, vote_breakpoints, ProposalSet, ProposedInterval, SegmentProposal,
    SegmentationConfig,
};
use cig_core::stats::{fit_ordinal, human_loo_mae, krippendorff_alpha_ordinal, pearson, qwk};
use cig_core::text::{RuleAnalyzer, TextAnalyzer};
use cig_core::transcript::{parse_episode, Episode, Interval};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(budget: Duration, started: Instant) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < budget, format!("took {took:.2?}, budget {budget:?}"))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn policy_totality() -> Outcome {
    let started = Instant::now();
    let expected = |rel: Relation, case: &str| -> (Action, Relation) {
        use Relation::*;
        match (case, rel) {
            ("none", _) | ("same", Neutral) => (Action::Add, Neutral),
            ("same", Equivalent | BackwardEntail) => (Action::None, rel),
            ("same", ForwardEntail | Contradiction) => (Action::Update, rel),
            (_, Neutral) => (Action::Add, Neutral),
            (_, r) => (Action::Add, r),
        }
    };
    let mut cells = 0;
    for rel in Relation::ALL {
        for case in ["same", "different", "none"] {
            let cands: Vec<Candidate> = match case {
                "none" => vec![],
                _ => vec![Candidate {
                    id: MemoryId(1),
                    same_speaker: case == "same",
                    similarity: 0.9,
                    relation: rel,
                }],
            };
            // A same-speaker neutral candidate is never a target, so it falls
            // through to the empty selection.
            let selected = select_target(&cands).map(|c| (c.same_speaker, c.relation));
            let got = decide_action(selected);
            ensure(
                got == expected(rel, case),
                format!("{rel:?}/{case}: got {got:?}"),
            )?;
            cells += 1;
        }
    }
    use NliLabel::*;
    let labels = [Entailment, Contradiction, Neutral];
    for f in labels {
        for b in labels {
            let want = match (f, b) {
                (Contradiction, _) | (_, Contradiction) => Relation::Contradiction,
                (Entailment, Entailment) => Relation::Equivalent,
                (Entailment, Neutral) => Relation::ForwardEntail,
                (Neutral, Entailment) => Relation::BackwardEntail,
                (Neutral, Neutral) => Relation::Neutral,
            };
            ensure(
                map_relation(f, b) == want,
                format!("map_relation({f:?}, {b:?})"),
            )?;
        }
    }
    let gw = Gateway::new(GatewayConfig {
        retries: 0,
        backoff: Duration::ZERO,
        max_in_flight: 1,
    })
    .with_chat("mock", Arc::new(HeuristicProvider::new()))
    .with_embedder(Arc::new(HashEmbedder::new(256)));
    let route = ModelRoute::new("mock", "heuristic");
    let caller = Caller {
        gateway: &gw,
        route: &route,
        policy: CachePolicy::Off,
        seed: 0,
    };
    let cats = [
        (
            "I have a cat",
            "My pet is a cat",
            Relation::Equivalent,
            Action::None,
        ),
        (
            "I have a black cat.",
            "I have a cat.",
            Relation::ForwardEntail,
            Action::Update,
        ),
        (
            "I have a black cat.",
            "I have a white cat.",
            Relation::Contradiction,
            Action::Update,
        ),
    ];
    for (a, b, rel, action) in cats {
        let (got, degraded) = classify_relation(a, b, &caller).map_err(err)?;
        ensure(!degraded && got == rel, format!("`{a}` vs `{b}`: {got:?}"))?;
        ensure(
            decide_action(Some((true, got))).0 == action,
            format!("`{a}` vs `{b}`: action"),
        )?;
    }
    within(Duration::from_secs(1), started)?;
    Ok(format!(
        "{cells} policy cells, 9 label pairs, 3 example pairs in {:.2?}",
        started.elapsed()
    ))
}

fn event_sourcing(out: &Path) -> Outcome {
    let embedder = HashEmbedder::new(256);
    let mut rows = 0;
    let mut episodes = 0;
    for entry in std::fs::read_dir(out.join("consolidate")).map_err(err)? {
        let path = entry.map_err(err)?.path();
        if path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        let Ok(mem) =
            serde_json::from_str::<EpisodeMemory>(&std::fs::read_to_string(&path).map_err(err)?)
        else {
            continue;
        };
        let live = &mem.store;
        let replayed = MemoryStore::replay(&live.episode_id, &live.timeline, |t| {
            Ok(embedder.embed_one(t))
        })
        .map_err(err)?;
        ensure(
            replayed.to_json() == live.to_json(),
            format!("{}: replay differs", live.episode_id),
        )?;
        let mut partial = MemoryStore::new(&live.episode_id);
        for row in &live.timeline {
            let before = partial.len();
            let emb = match row.action {
                Action::None => None,
                _ => row.resulting_text.as_deref().map(|t| embedder.embed_one(t)),
            };
            partial.apply_resolved(row.clone(), emb).map_err(err)?;
            let want = if row.action == Action::Add {
                before + 1
            } else {
                before
            };
            ensure(
                partial.len() == want,
                format!(
                    "{}: {:?} moved size {before} to {}",
                    live.episode_id,
                    row.action,
                    partial.len()
                ),
            )?;
        }
        let adds = live
            .timeline
            .iter()
            .filter(|u| u.action == Action::Add)
            .count();
        ensure(
            adds == live.len(),
            format!("{}: {adds} ADDs but {} items", live.episode_id, live.len()),
        )?;
        let from_records: usize = mem.records.iter().map(|r| r.actions.len()).sum();
        ensure(
            from_records == live.timeline.len(),
            format!("{}: records and timeline differ", live.episode_id),
        )?;
        rows += live.timeline.len();
        episodes += 1;
    }
    ensure(rows > 0, "no timeline rows found")?;
    Ok(format!(
        "{rows} timeline rows over {episodes} episodes replay byte-identically"
    ))
}

fn brute_votes(runs: &[Vec<usize>], d: Interval, w: f64) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for i in d.start..=d.end {
        let mut total = 0.0;
        let mut hit = false;
        for starts in runs {
            let mut best: f64 = 0.0;
            for &b in starts {
                let weight = if i == b {
                    1.0
                } else if i + 1 == b || b + 1 == i {
                    w
                } else {
                    0.0
                };
                best = best.max(weight);
                hit |= weight > 0.0;
            }
            total += best;
        }
        if hit {
            out.insert(i, total);
        }
    }
    out
}

fn synthetic_episode(rng: &mut ChaCha8Rng, intro: usize, discussion: usize) -> Episode {
    let mut lines = vec![r#"{"id":"r","topic":"t","corpus_tag":"x"}"#.to_string()];
    for i in 0..intro + discussion {
        let text = vec!["word"; rng.random_range(1..60)].join(" ");
        let phase = if i < intro {
            "introduction"
        } else {
            "discussion"
        };
        lines.push(format!(
            r#"{{"index":{i},"speaker_id":"s{}","speaker_name":"S","role":"participant","text":"{text}","phase":"{phase}"}}"#,
            i % 4
        ));
    }
    parse_episode(&lines.join("\n")).expect("synthetic episode parses")
}

fn segmentation_sets() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut segments = 0;
    for set in 0..1000 {
        let intro = rng.random_range(0..4);
        let n = rng.random_range(2..60);
        let ep = synthetic_episode(&mut rng, intro, n);
        let d = ep.discussion();
        let min_len = rng.random_range(1..4);
        let low = rng.random_range(20..200);
        let config = SegmentationConfig {
            runs: 5,
            min_surviving_runs: 1,
            neighbor_weight: [0.25, 0.5, 0.75][rng.random_range(0..3)],
            peak_threshold: rng.random_range(0.0..1.0),
            min_len,
            max_len: 2 * min_len + rng.random_range(0..15),
            target_words: [low, low + rng.random_range(1..400)],
            max_turns: rng.random_range(1..30),
        };
        let mut runs = Vec::new();
        let mut proposals = Vec::new();
        for run in 0..rng.random_range(1..7) {
            let mut starts: Vec<usize> = (d.start + 1..=d.end)
                .filter(|_| rng.random_bool(0.2))
                .collect();
            starts.insert(0, d.start);
            let intervals = starts
                .iter()
                .enumerate()
                .map(|(k, &s)| ProposedInterval {
                    segment_index: k,
                    interval: Interval::new(s, starts.get(k + 1).map_or(d.end, |x| x - 1)),
                    subtopic: String::new(),
                })
                .collect();
            proposals.push(SegmentProposal {
                run_index: run,
                intervals,
            });
            runs.push(starts);
        }
        let profile = vote_breakpoints(&proposals, d, config.neighbor_weight);
        let oracle = brute_votes(&runs, d, config.neighbor_weight);
        ensure(
            profile.votes == oracle,
            format!("set {set}: votes differ from oracle"),
        )?;
        for (i, v) in &oracle {
            let c = profile.confidence(*i);
            ensure(
                c == v / runs.len() as f64 && (0.0..=1.0).contains(&c),
                format!("set {set}: confidence at {i}"),
            )?;
        }
        let result = segment_from_proposals(
            &ep,
            &config,
            ProposalSet {
                proposals,
                discarded: vec![],
            },
        );
        let segs = &result.segments;
        ensure(
            segs.first().map(|s| s.interval.start) == Some(d.start),
            format!("set {set}: first segment start"),
        )?;
        ensure(
            segs.last().map(|s| s.interval.end) == Some(d.end),
            format!("set {set}: last segment end"),
        )?;
        for (k, s) in segs.iter().enumerate() {
            let len = s.interval.end + 1 - s.interval.start;
            ensure(
                (1..=config.max_len).contains(&len),
                format!("set {set}: segment {k} has {len} utterances"),
            )?;
            ensure(
                s.segment_index == k,
                format!("set {set}: segment index {k}"),
            )?;
            if let Some(next) = segs.get(k + 1) {
                ensure(
                    next.interval.start == s.interval.end + 1,
                    format!("set {set}: gap or overlap after {k}"),
                )?;
            }
        }
        segments += segs.len();
    }
    within(Duration::from_secs(10), started)?;
    Ok(format!(
        "1000 proposal sets, {segments} segments, in {:.2?}",
        started.elapsed()
    ))
}

fn close(a: f64, b: f64, what: &str) -> Result<(), String> {
    ensure((a - b).abs() <= 1e-9, format!("{what}: {a} vs oracle {b}"))
}

/// Recomputes every lexical feature from the analyzer's tokens, lemmas and
/// entities with direct loops, then compares.
fn proxy_formulas() -> Outcome {
    let analyzer = RuleAnalyzer;
    let texts = [
        "Taxes fund the Boston trains and the Boston buses.",
        "Boston trains need new taxes, and taxes are unpopular!",
        "Parks matter to families in Springfield.",
    ];
    let docs: Vec<Vec<String>> = texts.iter().map(|t| analyzer.content_lemmas(t)).collect();
    let n = docs.len() as f64;
    let df = |w: &str| docs.iter().filter(|d| d.iter().any(|x| x == w)).count() as f64;
    let idf = |w: &str| {
        let d = df(w);
        (d >= 2.0 && d / n <= 0.95).then(|| ((1.0 + n) / (1.0 + d)).ln() + 1.0)
    };
    let model = fit_tfidf(&docs).map_err(err)?;
    let mut state = VocabState::default();
    let mut seen_words: BTreeSet<String> = BTreeSet::new();
    let mut seen_ents: BTreeSet<String> = BTreeSet::new();
    let mut weighted_terms = 0;
    for (i, text) in texts.iter().enumerate() {
        let f = compute_lexical_features(text, &analyzer, &model, &mut state);
        let lemmas = &docs[i];
        let n_tok = analyzer.tokenize(text).len();
        let ents: Vec<String> = analyzer
            .entities(text)
            .iter()
            .map(|e| e.text.to_lowercase())
            .collect();
        let uniq: BTreeSet<&String> = lemmas.iter().collect();
        let mut weights = Vec::new();
        let mut idfs = Vec::new();
        for w in &uniq {
            if let Some(v) = idf(w) {
                let tf = lemmas.iter().filter(|x| x == w).count() as f64;
                weights.push(tf * v);
                idfs.push(v);
            }
        }
        weighted_terms += weights.len();
        let sum: f64 = weights.iter().sum();
        let max = weights.iter().copied().fold(0.0, f64::max);
        let mean = if weights.is_empty() {
            0.0
        } else {
            sum / weights.len() as f64
        };
        idfs.sort_by(f64::total_cmp);
        let spec_mean = if idfs.is_empty() {
            0.0
        } else {
            idfs.iter().sum::<f64>() / idfs.len() as f64
        };
        let spec_median = match idfs.len() {
            0 => 0.0,
            k if k % 2 == 1 => idfs[k / 2],
            k => (idfs[k / 2 - 1] + idfs[k / 2]) / 2.0,
        };
        let novel = uniq.iter().filter(|w| !seen_words.contains(**w)).count();
        let uniq_ents: BTreeSet<&String> = ents.iter().collect();
        let novel_ents = uniq_ents
            .iter()
            .filter(|e| !seen_ents.contains(**e))
            .count();
        ensure(
            f.n_tok == n_tok && f.n_cont == lemmas.len(),
            format!("utterance {i}: token counts"),
        )?;
        close(f.tfidf_sum, sum, "tfidf_sum")?;
        close(f.tfidf_max, max, "tfidf_max")?;
        close(f.tfidf_mean, mean, "tfidf_mean")?;
        close(f.specificity_mean_idf, spec_mean, "specificity_mean_idf")?;
        close(
            f.specificity_median_idf,
            spec_median,
            "specificity_median_idf",
        )?;
        ensure(
            f.novel_word_count == novel,
            format!("utterance {i}: novel words"),
        )?;
        close(
            f.novel_word_density,
            novel as f64 / lemmas.len().max(1) as f64,
            "novel_word_density",
        )?;
        ensure(
            f.entity_count == ents.len() && f.novel_entity_count == novel_ents,
            format!("utterance {i}: entities"),
        )?;
        close(
            f.novel_entity_ratio,
            novel_ents as f64 / uniq_ents.len().max(1) as f64,
            "novel_entity_ratio",
        )?;
        close(
            f.novel_entity_density_token,
            novel_ents as f64 / n_tok.max(1) as f64,
            "novel_entity_density_token",
        )?;
        seen_words.extend(lemmas.iter().cloned());
        seen_ents.extend(ents);
    }
    ensure(weighted_terms > 0, "hand corpus produced no weighted terms")?;
    ensure(!seen_ents.is_empty(), "hand corpus produced no entities")?;

    let trace = [-0.5, -4.0, -0.25, -3.0, -2.0, -1.5, -6.0];
    let s = compute_surprisal_features(Some(&trace)).ok_or("no surprisal features")?;
    close(s.sent_avg_h, 17.25 / 7.0, "sent_avg_h")?;
    close(s.sum_h, 7.0 * s.sent_avg_h, "sum_h = T * sent_avg_h")?;
    close(
        s.top_quartile_avg_logprob,
        (-0.25 - 0.5) / 2.0,
        "top quartile",
    )?;
    ensure(
        compute_surprisal_features(Some(&[])).is_none(),
        "empty trace has features",
    )?;

    let level = |v| Level::new(v).ok();
    let p = AspectPredictions {
        info: level(3),
        novo: level(2),
        relv: level(4),
        imsc: level(3),
    };
    let m = compute_memory_dynamics(&[Action::Add, Action::None, Action::Update], Some(&p));
    ensure(m.claim_count == 3 && m.mem_delta == 2, "memory delta")?;
    ensure(
        (
            m.mem_delta_info,
            m.mem_delta_novo,
            m.mem_delta_relv,
            m.mem_delta_imsc,
            m.mem_delta_triad,
        ) == (Some(2), Some(0), Some(2), Some(2), Some(0)),
        format!("gated deltas {m:?}"),
    )?;
    Ok(format!(
        "{weighted_terms} weighted terms, surprisal and gating match to 1e-9"
    ))
}

fn statistics() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let x: Vec<f64> = (0..500).map(|_| rng.random_range(-3.0..3.0)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|v| 0.4 * v + rng.random_range(-1.0..1.0))
        .collect();
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    let direct = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
    let r = pearson(&x, &y).map_err(err)?;
    ensure(
        (r - direct).abs() <= 1e-12,
        format!("pearson {r} vs {direct}"),
    )?;

    let row: Vec<Option<u8>> = (0..200).map(|i| Some(1 + (i % 4) as u8)).collect();
    let alpha = krippendorff_alpha_ordinal(&[row.clone(), row.clone(), row]).map_err(err)?;
    ensure(alpha == 1.0, format!("alpha on perfect agreement {alpha}"))?;
    let indep: Vec<Vec<Option<u8>>> = (0..2)
        .map(|_| {
            (0..10_000)
                .map(|_| Some(rng.random_range(1..=4u8)))
                .collect()
        })
        .collect();
    let alpha0 = krippendorff_alpha_ordinal(&indep).map_err(err)?;
    ensure(
        alpha0.abs() <= 0.05,
        format!("alpha under independence {alpha0}"),
    )?;

    // Disagreements (2,3) and (1,2): weighted observed 1/27, expected 13/54.
    let k = qwk(&[1, 2, 3, 4, 1, 2], &[1, 3, 3, 4, 2, 2]).map_err(err)?;
    ensure(
        (k.kappa - 11.0 / 13.0).abs() <= 1e-12,
        format!("qwk {}", k.kappa),
    )?;

    // a: (|1 - 2.5| + |4 - 4|) / 2, b: (|2 - 2| + 0) / 2, c: |3 - 1.5|.
    let loo_in: BTreeMap<u8, BTreeMap<String, f64>> = [
        (1, vec![("a", 1.0), ("b", 2.0), ("c", 3.0)]),
        (2, vec![("a", 4.0), ("b", 4.0)]),
        (3, vec![("a", 2.0)]),
    ]
    .into_iter()
    .map(|(k, v)| (k, v.into_iter().map(|(a, r)| (a.to_string(), r)).collect()))
    .collect();
    let loo = human_loo_mae(&loo_in).map_err(err)?;
    let want: BTreeMap<String, f64> = [("a", 0.75), ("b", 0.0), ("c", 1.5)]
        .into_iter()
        .map(|(a, v)| (a.into(), v))
        .collect();
    ensure(
        loo.per_annotator == want,
        format!("loo per annotator {:?}", loo.per_annotator),
    )?;
    ensure(
        (loo.mean - 0.75).abs() <= 1e-12 && (loo.std - 0.75).abs() <= 1e-12,
        format!("loo {loo:?}"),
    )?;
    ensure(
        (loo.items_used, loo.items_excluded) == (2, 1),
        "loo item counts",
    )?;

    let counts = [7usize, 11, 5, 9];
    let labels: Vec<u8> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &m)| std::iter::repeat_n(c as u8 + 1, m))
        .collect();
    let total = labels.len() as f64;
    let ll: f64 = counts
        .iter()
        .map(|&c| c as f64 * (c as f64 / total).ln())
        .sum();
    let null_aic = 2.0 * 3.0 - 2.0 * ll;
    let null = fit_ordinal(&labels, &vec![vec![]; labels.len()], &[], "null").map_err(err)?;
    ensure(
        (null.aic - null_aic).abs() <= 1e-6,
        format!("null AIC {} vs {null_aic}", null.aic),
    )?;

    let cuts = [-1.0, 0.5, 2.0];
    let mut ys = Vec::with_capacity(5000);
    let mut xs = Vec::with_capacity(5000);
    for _ in 0..5000 {
        let x: f64 = StandardNormal.sample(&mut rng);
        let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
        let latent = 1.5 * x + (u / (1.0 - u)).ln();
        ys.push(1 + cuts.iter().filter(|c| latent > **c).count() as u8);
        xs.push(vec![x]);
    }
    let fit = fit_ordinal(&ys, &xs, &["x"], "x").map_err(err)?;
    let beta = fit.coefficients[0];
    ensure(
        fit.converged && (beta - 1.5).abs() <= 0.15,
        format!("recovered beta {beta}"),
    )?;

    within(Duration::from_secs(60), started)?;
    Ok(format!(
        "independent alpha {alpha0:.4}, beta {beta:.3}, in {:.2?}",
        started.elapsed()
    ))
}

fn aggregation_grid() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut claims = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for u in 0..40 {
        let cs: Vec<ClaimRating> = (0..rng.random_range(2..6u64))
            .map(|id| {
                let mut l = || Level::new(rng.random_range(1..=4u8)).expect("level in range");
                ClaimRating {
                    id,
                    informativeness: l(),
                    novelty: l(),
                    relevance: l(),
                    implication_scope: l(),
                }
            })
            .collect();
        let top2 = |f: fn(&ClaimRating) -> Level| {
            let mut v: Vec<f64> = cs.iter().map(|c| f(c).value()).collect();
            v.sort_by(|a, b| b.total_cmp(a));
            (v[0] + v[1]) / 2.0
        };
        let label = top2(|c| c.novelty)
            .min(top2(|c| c.relevance))
            .min(top2(|c| c.implication_scope));
        let key = UtteranceKey {
            episode_id: "g".into(),
            utterance_index: u,
        };
        claims.insert(key.clone(), cs);
        labels.insert(key, label);
    }
    let grid = run_aggregation_grid(&claims, &labels).map_err(err)?;
    let target = grid.mae(ClaimOp::Top2Mean, AspectOp::Min);
    ensure(target == 0.0, format!("top2_mean/min MAE {target}"))?;
    let runner_up = grid
        .cells
        .iter()
        .filter(|c| (c.claim_op, c.aspect_op) != (ClaimOp::Top2Mean, AspectOp::Min))
        .map(|c| c.mae)
        .fold(f64::INFINITY, f64::min);
    ensure(runner_up > 0.0, "another cell ties the minimum")?;
    for _ in 0..1000 {
        let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(1.0..=4.0));
        let [lo, mid, hi] = [AspectOp::Min, AspectOp::Mean, AspectOp::Max]
            .map(|op| combine_aspects(t[0], t[1], t[2], op));
        ensure(lo <= mid && mid <= hi, format!("ordering fails on {t:?}"))?;
    }
    Ok(format!(
        "{} cells, planted cell MAE 0, runner-up {runner_up:.4}, 1000 triples ordered",
        grid.cells.len()
    ))
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic")
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for e in std::fs::read_dir(from)? {
        let e = e?;
        let name = e.file_name();
        if name == "out" || name == ".cig-cache" {
            continue;
        }
        if e.file_type()?.is_dir() {
            copy_dir(&e.path(), &to.join(&name))?;
        } else {
            std::fs::copy(e.path(), to.join(&name))?;
        }
    }
    Ok(())
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, std::fs::read(&p).unwrap_or_default());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Runs the full pipeline and returns the summed provider calls.
fn cli_run(workdir: &Path, out: &str) -> Result<u64, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_cig"))
        .current_dir(workdir)
        .args([
            "--config",
            "cig.toml",
            "--providers",
            "mock",
            "--out",
            out,
            "run",
        ])
        .output()
        .map_err(err)?;
    ensure(
        o.status.success(),
        format!("cig run failed: {}", String::from_utf8_lossy(&o.stderr)),
    )?;
    let stdout = String::from_utf8_lossy(&o.stdout);
    Ok(stdout
        .lines()
        .filter_map(|l| {
            let w: Vec<&str> = l.split_whitespace().collect();
            let at = w.iter().position(|x| *x == "provider")?;
            w.get(at.checked_sub(1)?)?.parse::<u64>().ok()
        })
        .sum())
}

fn end_to_end(work: &Path) -> Outcome {
    let started = Instant::now();
    let cold = cli_run(work, "run-a")?;
    let warm = cli_run(work, "run-b")?;
    let (a, b) = (tree(&work.join("run-a")), tree(&work.join("run-b")));
    ensure(!a.is_empty(), "empty output tree")?;
    ensure(a.keys().eq(b.keys()), "output trees list different files")?;
    for (path, bytes) in &a {
        ensure(&b[path] == bytes, format!("{} differs", path.display()))?;
    }
    let reports = a.keys().filter(|p| p.starts_with("report")).count();
    ensure(reports == 8, format!("{reports} report files, expected 8"))?;
    ensure(
        cold > 0 && warm == 0,
        format!("provider calls cold {cold}, warm {warm}"),
    )?;
    within(Duration::from_secs(120), started)?;
    Ok(format!(
        "{} files identical, {reports} reports, calls cold {cold} warm {warm}, {:.2?}",
        a.len(),
        started.elapsed()
    ))
}

fn memory_beats_entities(out: &Path) -> Outcome {
    let text = std::fs::read_to_string(out.join("stats/stats.json")).map_err(err)?;
    let stats: Value = serde_json::from_str(&text).map_err(err)?;
    let abs_r = |name: &str| -> Result<f64, String> {
        stats["correlations"]
            .as_array()
            .and_then(|rows| rows.iter().find(|r| r["feature"] == name))
            .and_then(|r| r["abs_r"].as_f64())
            .ok_or_else(|| format!("no correlation for {name}"))
    };
    let (mem, ent) = (abs_r("mem_delta")?, abs_r("entity_count")?);
    ensure(
        mem > ent,
        format!("|r| mem_delta {mem:.4} <= entity_count {ent:.4}"),
    )?;
    Ok(format!("|r| mem_delta {mem:.4} > entity_count {ent:.4}"))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    copy_dir(&fixture_dir(), work.path()).expect("copy fixture");
    let run_a = work.path().join("run-a");

    let mut results: Vec<(&str, Outcome)> = vec![
        ("consolidation policy totality", policy_totality()),
        ("segmentation voting and tiling", segmentation_sets()),
        ("proxy formulas", proxy_formulas()),
        ("statistics suite", statistics()),
        ("aggregation grid", aggregation_grid()),
        ("end-to-end determinism", end_to_end(work.path())),
    ];
    results.push(("event-sourced replay", event_sourcing(&run_a)));
    results.push((
        "memory delta outranks entity count",
        memory_beats_entities(&run_a),
    ));

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
