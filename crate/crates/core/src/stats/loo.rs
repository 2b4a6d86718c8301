//! Error baselines: leave-one-annotator-out MAE among humans, and per-aspect
//! MAE between two conditions over repeated runs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rating::{Dimension, UtteranceKey};

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub per_annotator: BTreeMap<String, f64>,
    pub mean: f64,
    pub std: f64,
    pub items_used: usize,
    pub items_excluded: usize,
}

/// Each annotator's MAE against the mean of the other annotators of the same
/// item. Items with a single annotator are excluded.
pub fn human_loo_mae<K: Ord>(ratings: &BTreeMap<K, BTreeMap<String, f64>>) -> Result<LooReport> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let (mut used, mut excluded) = (0, 0);
    for by_annotator in ratings.values() {
        if by_annotator.len() < 2 {
            excluded += 1;
            continue;
        }
        used += 1;
        let total: f64 = by_annotator.values().sum();
        let others = (by_annotator.len() - 1) as f64;
        for (a, &r) in by_annotator {
            let e = acc.entry(a.clone()).or_default();
            e.0 += (r - (total - r) / others).abs();
            e.1 += 1;
        }
    }
    if acc.is_empty() {
        return Err(Error::validation("no item has two or more annotators"));
    }
    let per_annotator: BTreeMap<String, f64> = acc
        .into_iter()
        .map(|(a, (s, n))| (a, s / n as f64))
        .collect();
    let (mean, std) = mean_std(&per_annotator.values().copied().collect::<Vec<_>>());
    Ok(LooReport {
        per_annotator,
        mean,
        std,
        items_used: used,
        items_excluded: excluded,
    })
}

/// One rating run: (utterance, dimension) → score.
pub type RunScores = BTreeMap<(UtteranceKey, Dimension), f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeStat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMae {
    pub per_dimension: BTreeMap<Dimension, MaeStat>,
    /// Per-run mean over dimensions, then mean ± std over runs.
    pub overall: MaeStat,
    pub runs: usize,
}

fn run_mae(a: &RunScores, b: &RunScores) -> Result<BTreeMap<Dimension, f64>> {
    let ka: BTreeSet<_> = a.keys().collect();
    let kb: BTreeSet<_> = b.keys().collect();
    if ka != kb {
        let only_a: Vec<String> = ka
            .difference(&kb)
            .map(|(u, d)| format!("{}#{}:{}", u.episode_id, u.utterance_index, d.as_str()))
            .collect();
        let only_b: Vec<String> = kb
            .difference(&ka)
            .map(|(u, d)| format!("{}#{}:{}", u.episode_id, u.utterance_index, d.as_str()))
            .collect();
        return Err(Error::validation(format!(
            "misaligned keys: only in A {only_a:?}, only in B {only_b:?}"
        )));
    }
    let mut acc: BTreeMap<Dimension, (f64, usize)> = BTreeMap::new();
    for (k, va) in a {
        let e = acc.entry(k.1).or_default();
        e.0 += (va - b[k]).abs();
        e.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(d, (s, n))| (d, s / n as f64))
        .collect())
}

/// Run r of A is compared with run r of B.
pub fn condition_mae(a: &[RunScores], b: &[RunScores]) -> Result<ConditionMae> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::validation(format!(
            "need matching non-empty run lists, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let per_run: Vec<BTreeMap<Dimension, f64>> = a
        .iter()
        .zip(b)
        .map(|(x, y)| run_mae(x, y))
        .collect::<Result<_>>()?;
    let dims: BTreeSet<Dimension> = per_run.iter().flat_map(|r| r.keys().copied()).collect();
    let mut per_dimension = BTreeMap::new();
    for d in dims {
        let v: Vec<f64> = per_run.iter().filter_map(|r| r.get(&d).copied()).collect();
        let (mean, std) = mean_std(&v);
        per_dimension.insert(d, MaeStat { mean, std });
    }
    let overall_runs: Vec<f64> = per_run
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| r.values().sum::<f64>() / r.len() as f64)
        .collect();
    if overall_runs.is_empty() {
        return Err(Error::validation("runs hold no scores"));
    }
    let (mean, std) = mean_std(&overall_runs);
    Ok(ConditionMae {
        per_dimension,
        overall: MaeStat { mean, std },
        runs: a.len(),
    })
}
