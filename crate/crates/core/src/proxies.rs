//! Per-utterance informativeness proxies: length, episode TF-IDF, lexical
//! specificity, cumulative word and entity novelty, surprisal, and memory
//! dynamics with aspect gating. Nothing here calls a provider.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{Action, ConsolidationRecord};
use crate::rating::Level;
use crate::text::TextAnalyzer;
use crate::transcript::{fmt_f, Episode};

pub const MIN_DF: usize = 2;
pub const MAX_DF_RATIO: f64 = 0.95;

/// Episode-level TF-IDF over content lemmas, one document per utterance.
/// Weights are raw counts times smoothed idf, unnormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfidfModel {
    pub n_docs: usize,
    pub df: BTreeMap<String, usize>,
    pub idf: BTreeMap<String, f64>,
}

pub fn fit_tfidf(docs: &[Vec<String>]) -> Result<TfidfModel> {
    if docs.len() < 2 {
        return Err(Error::validation("TF-IDF needs at least two documents"));
    }
    let n = docs.len();
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for d in docs {
        for t in d.iter().collect::<BTreeSet<_>>() {
            *df.entry(t.clone()).or_default() += 1;
        }
    }
    let idf = df
        .iter()
        .filter(|(_, &d)| d >= MIN_DF && d as f64 / n as f64 <= MAX_DF_RATIO)
        .map(|(t, &d)| (t.clone(), ((1 + n) as f64 / (1 + d) as f64).ln() + 1.0))
        .collect();
    Ok(TfidfModel { n_docs: n, df, idf })
}

pub fn fit_episode_tfidf(episode: &Episode, analyzer: &dyn TextAnalyzer) -> Result<TfidfModel> {
    let docs: Vec<Vec<String>> = episode
        .utterances
        .iter()
        .map(|u| analyzer.content_lemmas(&u.text))
        .collect();
    fit_tfidf(&docs)
}

impl TfidfModel {
    /// Nonzero weights of a document, by term.
    pub fn weights(&self, lemmas: &[String]) -> BTreeMap<String, f64> {
        let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
        for l in lemmas {
            *tf.entry(l.as_str()).or_default() += 1;
        }
        tf.into_iter()
            .filter_map(|(t, c)| self.idf.get(t).map(|idf| (t.to_string(), c as f64 * idf)))
            .collect()
    }
}

/// Content lemmas and entity forms seen so far in the episode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VocabState {
    pub words: BTreeSet<String>,
    pub entities: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalFeatures {
    pub n_tok: usize,
    pub n_cont: usize,
    pub tfidf_sum: f64,
    pub tfidf_max: f64,
    pub tfidf_mean: f64,
    pub specificity_mean_idf: f64,
    pub specificity_median_idf: f64,
    pub novel_word_count: usize,
    pub novel_word_density: f64,
    pub entity_count: usize,
    pub novel_entity_count: usize,
    pub novel_entity_ratio: f64,
    pub novel_entity_density_token: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Lexical features of one utterance; `state` is read, then extended.
pub fn compute_lexical_features(
    text: &str,
    analyzer: &dyn TextAnalyzer,
    model: &TfidfModel,
    state: &mut VocabState,
) -> LexicalFeatures {
    let tokens = analyzer.tokenize(text);
    let lemmas: Vec<String> = tokens
        .iter()
        .filter(|t| t.is_content)
        .map(|t| t.lemma.clone())
        .collect();
    let weights = model.weights(&lemmas);
    let w: Vec<f64> = weights.values().copied().collect();
    let (tfidf_sum, tfidf_max, tfidf_mean) = if w.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        let s: f64 = w.iter().sum();
        (
            s,
            w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            s / w.len() as f64,
        )
    };
    let idfs: Vec<f64> = weights.keys().map(|t| model.idf[t]).collect();
    let (spec_mean, spec_median) = if idfs.is_empty() {
        (0.0, 0.0)
    } else {
        (idfs.iter().sum::<f64>() / idfs.len() as f64, median(idfs))
    };

    let unique: BTreeSet<&String> = lemmas.iter().collect();
    let novel_words = unique.iter().filter(|l| !state.words.contains(**l)).count();
    let ents: Vec<String> = analyzer
        .entities(text)
        .into_iter()
        .map(|e| e.text.to_lowercase())
        .collect();
    let unique_ents: BTreeSet<&String> = ents.iter().collect();
    let novel_ents = unique_ents
        .iter()
        .filter(|e| !state.entities.contains(**e))
        .count();

    let n_tok = tokens.len();
    let n_cont = lemmas.len();
    let features = LexicalFeatures {
        n_tok,
        n_cont,
        tfidf_sum,
        tfidf_max,
        tfidf_mean,
        specificity_mean_idf: spec_mean,
        specificity_median_idf: spec_median,
        novel_word_count: novel_words,
        novel_word_density: novel_words as f64 / n_cont.max(1) as f64,
        entity_count: ents.len(),
        novel_entity_count: novel_ents,
        novel_entity_ratio: novel_ents as f64 / unique_ents.len().max(1) as f64,
        novel_entity_density_token: novel_ents as f64 / n_tok.max(1) as f64,
    };
    state.words.extend(lemmas);
    state.entities.extend(ents);
    features
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurprisalFeatures {
    /// Evaluated tokens.
    pub n_eval: usize,
    pub sent_avg_h: f64,
    pub sum_h: f64,
    pub top_quartile_avg_logprob: f64,
}

/// Surprisal aggregates of a base-2 log-probability trace. An absent or empty
/// trace has no features.
pub fn compute_surprisal_features(trace: Option<&[f64]>) -> Option<SurprisalFeatures> {
    let trace = trace.filter(|t| !t.is_empty())?;
    let t = trace.len();
    let sum_h: f64 = trace.iter().map(|l| -l).sum();
    let mut sorted = trace.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let q = t.div_ceil(4);
    Some(SurprisalFeatures {
        n_eval: t,
        sent_avg_h: sum_h / t as f64,
        sum_h,
        top_quartile_avg_logprob: sorted[..q].iter().sum::<f64>() / q as f64,
    })
}

/// sent_avg_h divided by the mean sent_avg_h of utterances with the same
/// evaluated length, over one batch.
pub fn normalize_surprisal(features: &[Option<SurprisalFeatures>]) -> Vec<Option<f64>> {
    let mut buckets: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for f in features.iter().flatten() {
        let b = buckets.entry(f.n_eval).or_default();
        b.0 += f.sent_avg_h;
        b.1 += 1;
    }
    features
        .iter()
        .map(|f| {
            f.map(|f| {
                let (s, n) = buckets[&f.n_eval];
                let mean = s / n as f64;
                if mean == 0.0 {
                    1.0
                } else {
                    f.sent_avg_h / mean
                }
            })
        })
        .collect()
}

/// Predicted per-utterance levels used for gating.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectPredictions {
    pub info: Option<Level>,
    pub novo: Option<Level>,
    pub relv: Option<Level>,
    pub imsc: Option<Level>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryFeatures {
    pub claim_count: usize,
    pub mem_delta: usize,
    pub mem_delta_info: Option<usize>,
    pub mem_delta_novo: Option<usize>,
    pub mem_delta_relv: Option<usize>,
    pub mem_delta_imsc: Option<usize>,
    pub mem_delta_triad: Option<usize>,
}

fn above_mid(l: Level) -> bool {
    l.get() > 2
}

pub fn compute_memory_dynamics(
    actions: &[Action],
    predictions: Option<&AspectPredictions>,
) -> MemoryFeatures {
    let delta = actions.iter().filter(|a| **a != Action::None).count();
    let gate = |l: Option<Level>| l.map(|l| if above_mid(l) { delta } else { 0 });
    let p = predictions.copied().unwrap_or_default();
    let triad = match (p.novo, p.relv, p.imsc) {
        (Some(n), Some(r), Some(s)) => Some(if above_mid(n) && above_mid(r) && above_mid(s) {
            delta
        } else {
            0
        }),
        _ => None,
    };
    MemoryFeatures {
        claim_count: actions.len(),
        mem_delta: delta,
        mem_delta_info: gate(p.info),
        mem_delta_novo: gate(p.novo),
        mem_delta_relv: gate(p.relv),
        mem_delta_imsc: gate(p.imsc),
        mem_delta_triad: triad,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyFeatureVector {
    pub episode_id: String,
    pub utterance_index: usize,
    pub skipped: bool,
    pub lexical: LexicalFeatures,
    pub surprisal: Option<SurprisalFeatures>,
    pub norm_sent_avg_h: Option<f64>,
    pub memory: MemoryFeatures,
}

/// Features for every utterance of an episode, in order. `traces` maps
/// utterance index to a base-2 log-probability trace; `records` are the
/// consolidation records; `predictions` exist only for rated utterances.
pub fn compute_episode_features(
    episode: &Episode,
    analyzer: &dyn TextAnalyzer,
    traces: &BTreeMap<usize, Vec<f64>>,
    records: &[ConsolidationRecord],
    predictions: &BTreeMap<usize, AspectPredictions>,
) -> Result<Vec<ProxyFeatureVector>> {
    let model = fit_episode_tfidf(episode, analyzer)?;
    let actions: BTreeMap<usize, &[Action]> = records
        .iter()
        .map(|r| (r.utterance_index, r.actions.as_slice()))
        .collect();
    let mut state = VocabState::default();
    let mut out = Vec::with_capacity(episode.utterances.len());
    for u in &episode.utterances {
        let lexical = compute_lexical_features(&u.text, analyzer, &model, &mut state);
        let surprisal = compute_surprisal_features(traces.get(&u.index).map(Vec::as_slice));
        let memory = compute_memory_dynamics(
            actions.get(&u.index).copied().unwrap_or(&[]),
            predictions.get(&u.index),
        );
        out.push(ProxyFeatureVector {
            episode_id: episode.id.clone(),
            utterance_index: u.index,
            skipped: u.skipped,
            lexical,
            surprisal,
            norm_sent_avg_h: None,
            memory,
        });
    }
    let surprisals: Vec<_> = out.iter().map(|f| f.surprisal).collect();
    for (f, n) in out.iter_mut().zip(normalize_surprisal(&surprisals)) {
        f.norm_sent_avg_h = n;
    }
    Ok(out)
}

pub const FEATURE_COLUMNS: [&str; 24] = [
    "n_tok",
    "n_cont",
    "tfidf_sum",
    "tfidf_max",
    "tfidf_mean",
    "specificity_mean_idf",
    "specificity_median_idf",
    "novel_word_count",
    "novel_word_density",
    "entity_count",
    "novel_entity_count",
    "novel_entity_ratio",
    "novel_entity_density_token",
    "sent_avg_h",
    "sum_h",
    "norm_sent_avg_h",
    "top_quartile_avg_logprob",
    "claim_count",
    "mem_delta",
    "mem_delta_info",
    "mem_delta_novo",
    "mem_delta_relv",
    "mem_delta_imsc",
    "mem_delta_triad",
];

impl ProxyFeatureVector {
    /// Feature values in `FEATURE_COLUMNS` order; `None` is a null.
    pub fn values(&self) -> [Option<f64>; 24] {
        let l = &self.lexical;
        let s = self.surprisal;
        let m = &self.memory;
        let c = |v: usize| Some(v as f64);
        let o = |v: Option<usize>| v.map(|v| v as f64);
        [
            c(l.n_tok),
            c(l.n_cont),
            Some(l.tfidf_sum),
            Some(l.tfidf_max),
            Some(l.tfidf_mean),
            Some(l.specificity_mean_idf),
            Some(l.specificity_median_idf),
            c(l.novel_word_count),
            Some(l.novel_word_density),
            c(l.entity_count),
            c(l.novel_entity_count),
            Some(l.novel_entity_ratio),
            Some(l.novel_entity_density_token),
            s.map(|s| s.sent_avg_h),
            s.map(|s| s.sum_h),
            self.norm_sent_avg_h,
            s.map(|s| s.top_quartile_avg_logprob),
            c(m.claim_count),
            c(m.mem_delta),
            o(m.mem_delta_info),
            o(m.mem_delta_novo),
            o(m.mem_delta_relv),
            o(m.mem_delta_imsc),
            o(m.mem_delta_triad),
        ]
    }

    pub fn get(&self, column: &str) -> Option<f64> {
        FEATURE_COLUMNS
            .iter()
            .position(|c| *c == column)
            .and_then(|i| self.values()[i])
    }
}

fn cell(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x.fract() == 0.0 && x.abs() < 1e15 => format!("{}", x as i64),
        Some(x) => fmt_f(x),
    }
}

/// One row per utterance; nulls are empty cells.
pub fn features_to_csv(rows: &[ProxyFeatureVector]) -> String {
    let mut out = String::from("episode_id,utterance_index,skipped");
    for c in FEATURE_COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{}",
            r.episode_id, r.utterance_index, r.skipped
        ));
        for v in r.values() {
            out.push(',');
            out.push_str(&cell(v));
        }
        out.push('\n');
    }
    out
}
