//! Corpus-level statistics over ratings and features, and their rendering as
//! CSV report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::stages::{model_source, ClaimRatingRow};
use crate::context::ContextCondition;
use crate::error::Result;
use crate::proxies::{ProxyFeatureVector, FEATURE_COLUMNS};
use crate::rating::{
    run_aggregation_grid, soft_labels, AggregationGrid, Dimension, RatingCondition, RatingRecord,
    RatingVariant, UtteranceKey,
};
use crate::stats::lag::LagSource;
use crate::stats::ordinal::MIN_OBSERVATIONS;
use crate::stats::{
    condition_mae, fit_ordinal, human_loo_mae, moderator_lag, pearson, quality_control,
    round_label, standardize, AgreementReport, LooReport, ModeratorLagProfile, RunScores,
    SessionRatings,
};
use crate::transcript::{fmt_f, Episode};

pub struct StatsInput<'a> {
    pub episodes: &'a [Episode],
    pub model: &'a [RatingRecord],
    pub human: &'a [RatingRecord],
    pub claims: &'a [ClaimRatingRow],
    pub features: &'a [ProxyFeatureVector],
    pub conditions: &'a [ContextCondition],
    pub max_lag: usize,
    pub ordinal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub session: String,
    pub variant: RatingVariant,
    pub annotators: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<AgreementReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeRow {
    /// `human_loo` or a model condition.
    pub source: String,
    pub dimension: Dimension,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: ContextCondition,
    pub reference: ContextCondition,
    /// A dimension name or `overall`.
    pub dimension: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalRow {
    pub feature: String,
    pub n: usize,
    pub aic_null: Option<f64>,
    pub aic: Option<f64>,
    pub delta_aic: Option<f64>,
    pub coefficient: Option<f64>,
    pub converged: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub feature: String,
    pub r: Option<f64>,
    pub abs_r: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelShare {
    pub source: String,
    pub dimension: Dimension,
    pub level: u8,
    pub count: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsBundle {
    pub agreement: Vec<AgreementRow>,
    pub human_loo: BTreeMap<Dimension, LooReport>,
    pub mae_vs_human: Vec<MaeRow>,
    pub condition_mae: Vec<ConditionRow>,
    pub ordinal: Vec<OrdinalRow>,
    pub correlations: Vec<CorrelationRow>,
    pub aggregation: Option<AggregationGrid>,
    pub moderator_lag: ModeratorLagProfile,
    pub label_distribution: Vec<LabelShare>,
}

fn variant_of(r: &RatingRecord) -> RatingVariant {
    r.variant()
}

fn dims_of(v: RatingVariant) -> &'static [Dimension] {
    match v {
        RatingVariant::Info => &[Dimension::Cig],
        RatingVariant::Mix => &Dimension::ASPECTS,
    }
}

fn agreement(human: &[RatingRecord]) -> Vec<AgreementRow> {
    let mut sessions: BTreeMap<(String, RatingVariant), SessionRatings> = BTreeMap::new();
    for r in human {
        let v = variant_of(r);
        let row = sessions
            .entry((r.episode_id.clone(), v))
            .or_default()
            .entry(r.source_id.clone())
            .or_default();
        for &d in dims_of(v) {
            if let Some(l) = r.scores.get(d) {
                row.insert(format!("{}:{}", r.utterance_index, d.as_str()), l.get());
            }
        }
    }
    sessions
        .into_iter()
        .map(|((session, variant), ratings)| AgreementRow {
            session,
            variant,
            annotators: ratings.len(),
            report: quality_control(&ratings).ok(),
        })
        .collect()
}

type Items = BTreeMap<UtteranceKey, BTreeMap<String, f64>>;

fn human_items(human: &[RatingRecord], d: Dimension) -> Items {
    let mut out: Items = BTreeMap::new();
    for r in human {
        if let Some(l) = r.scores.get(d) {
            out.entry(r.utterance())
                .or_default()
                .insert(r.source_id.clone(), l.value());
        }
    }
    out
}

fn human_means(human: &[RatingRecord]) -> RunScores {
    let mut out = RunScores::new();
    for d in Dimension::ALL {
        for (k, by) in human_items(human, d) {
            out.insert((k, d), by.values().sum::<f64>() / by.len() as f64);
        }
    }
    out
}

fn model_runs(model: &[RatingRecord], c: ContextCondition) -> Vec<RunScores> {
    let runs: BTreeSet<&str> = model.iter().map(|r| r.source_id.as_str()).collect();
    let mut out = Vec::new();
    for r in 0.. {
        let src = model_source(r);
        if !runs.contains(src.as_str()) {
            break;
        }
        let mut run = RunScores::new();
        for rec in model
            .iter()
            .filter(|x| x.source_id == src && x.condition == RatingCondition::Model(c))
        {
            for d in Dimension::ALL {
                if let Some(l) = rec.scores.get(d) {
                    run.insert((rec.utterance(), d), l.value());
                }
            }
        }
        out.push(run);
    }
    out
}

fn restrict(run: &RunScores, keys: &RunScores) -> RunScores {
    run.iter()
        .filter(|(k, _)| keys.contains_key(k))
        .map(|(k, v)| (k.clone(), *v))
        .collect()
}

fn mae_vs_human(input: &StatsInput, loo: &BTreeMap<Dimension, LooReport>) -> Vec<MaeRow> {
    let mut rows: Vec<MaeRow> = loo
        .iter()
        .map(|(d, r)| MaeRow {
            source: "human_loo".into(),
            dimension: *d,
            mean: r.mean,
            std: r.std,
            n: r.items_used,
        })
        .collect();
    let human = human_means(input.human);
    for &c in input.conditions {
        let runs = model_runs(input.model, c);
        if runs.is_empty() {
            continue;
        }
        let a: Vec<RunScores> = runs.iter().map(|r| restrict(r, &human)).collect();
        let b: Vec<RunScores> = a.iter().map(|r| restrict(&human, r)).collect();
        if let Ok(m) = condition_mae(&a, &b) {
            for (d, s) in m.per_dimension {
                let n = a[0].keys().filter(|k| k.1 == d).count();
                rows.push(MaeRow {
                    source: c.as_str().into(),
                    dimension: d,
                    mean: s.mean,
                    std: s.std,
                    n,
                });
            }
        }
    }
    rows
}

fn condition_table(input: &StatsInput) -> Vec<ConditionRow> {
    let reference = ContextCondition::Full;
    if !input.conditions.contains(&reference) {
        return vec![];
    }
    let base = model_runs(input.model, reference);
    let mut rows = Vec::new();
    for &c in input.conditions.iter().filter(|c| **c != reference) {
        let runs = model_runs(input.model, c);
        let Ok(m) = condition_mae(&runs, &base) else {
            continue;
        };
        for (d, s) in &m.per_dimension {
            rows.push(ConditionRow {
                condition: c,
                reference,
                dimension: d.as_str().into(),
                mean: s.mean,
                std: s.std,
                runs: m.runs,
            });
        }
        rows.push(ConditionRow {
            condition: c,
            reference,
            dimension: "overall".into(),
            mean: m.overall.mean,
            std: m.overall.std,
            runs: m.runs,
        });
    }
    rows
}

/// Rows pairing each rated, non-skipped utterance's soft label with a feature.
fn labelled<'a>(
    features: &'a [ProxyFeatureVector],
    labels: &'a BTreeMap<UtteranceKey, f64>,
    column: &'a str,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    features.iter().filter(|f| !f.skipped).filter_map(move |f| {
        let key = UtteranceKey {
            episode_id: f.episode_id.clone(),
            utterance_index: f.utterance_index,
        };
        Some((f.get(column)?, *labels.get(&key)?))
    })
}

fn correlations(
    features: &[ProxyFeatureVector],
    labels: &BTreeMap<UtteranceKey, f64>,
) -> Vec<CorrelationRow> {
    let mut rows: Vec<CorrelationRow> = FEATURE_COLUMNS
        .iter()
        .map(|c| {
            let (x, y): (Vec<f64>, Vec<f64>) = labelled(features, labels, c).unzip();
            let r = pearson(&x, &y).ok().filter(|r| r.is_finite());
            CorrelationRow {
                feature: c.to_string(),
                r,
                abs_r: r.map(f64::abs),
                n: x.len(),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.abs_r
            .unwrap_or(-1.0)
            .total_cmp(&a.abs_r.unwrap_or(-1.0))
            .then_with(|| a.feature.cmp(&b.feature))
    });
    rows
}

fn ordinal_table(
    features: &[ProxyFeatureVector],
    labels: &BTreeMap<UtteranceKey, f64>,
) -> Vec<OrdinalRow> {
    FEATURE_COLUMNS
        .iter()
        .map(|c| {
            let (x, y): (Vec<f64>, Vec<f64>) = labelled(features, labels, c).unzip();
            let mut row = OrdinalRow {
                feature: c.to_string(),
                n: x.len(),
                aic_null: None,
                aic: None,
                delta_aic: None,
                coefficient: None,
                converged: None,
            };
            if x.len() < MIN_OBSERVATIONS {
                return row;
            }
            let ys: Vec<u8> = y.iter().map(|v| round_label(*v)).collect();
            let z = standardize(&x);
            let rows: Vec<Vec<f64>> = z.iter().map(|v| vec![*v]).collect();
            let empty: Vec<Vec<f64>> = vec![vec![]; ys.len()];
            if let (Ok(null), Ok(fit)) = (
                fit_ordinal(&ys, &empty, &[], "cig"),
                fit_ordinal(&ys, &rows, &[c], "cig"),
            ) {
                row.aic_null = Some(null.aic);
                row.aic = Some(fit.aic);
                row.delta_aic = Some(fit.aic - null.aic);
                row.coefficient = fit.coefficients.first().copied();
                row.converged = Some(fit.converged && null.converged);
            }
            row
        })
        .collect()
}

fn label_distribution(input: &StatsInput) -> Vec<LabelShare> {
    let mut counts: BTreeMap<(String, Dimension), [usize; 4]> = BTreeMap::new();
    for r in input.human.iter().chain(input.model) {
        let source = r.condition.to_string();
        for d in Dimension::ALL {
            if let Some(l) = r.scores.get(d) {
                counts.entry((source.clone(), d)).or_default()[l.get() as usize - 1] += 1;
            }
        }
    }
    let mut out = Vec::new();
    for ((source, dimension), c) in counts {
        let total: usize = c.iter().sum();
        for (i, n) in c.iter().enumerate() {
            out.push(LabelShare {
                source: source.clone(),
                dimension,
                level: i as u8 + 1,
                count: *n,
                share: *n as f64 / total as f64,
            });
        }
    }
    out
}

pub fn compute(input: &StatsInput) -> Result<StatsBundle> {
    let labels = soft_labels(input.human);
    let mut human_loo = BTreeMap::new();
    for d in Dimension::ALL {
        if let Ok(r) = human_loo_mae(&human_items(input.human, d)) {
            human_loo.insert(d, r);
        }
    }
    let claims: BTreeMap<UtteranceKey, Vec<_>> = input
        .claims
        .iter()
        .map(|c| {
            (
                UtteranceKey {
                    episode_id: c.episode_id.clone(),
                    utterance_index: c.utterance_index,
                },
                c.ratings.clone(),
            )
        })
        .collect();
    let per_episode: Vec<BTreeMap<usize, f64>> = input
        .episodes
        .iter()
        .map(|e| {
            labels
                .iter()
                .filter(|(k, _)| k.episode_id == e.id)
                .map(|(k, v)| (k.utterance_index, *v))
                .collect()
        })
        .collect();
    let lag_input: Vec<(&Episode, &BTreeMap<usize, f64>)> =
        input.episodes.iter().zip(&per_episode).collect();
    Ok(StatsBundle {
        agreement: agreement(input.human),
        mae_vs_human: mae_vs_human(input, &human_loo),
        human_loo,
        condition_mae: condition_table(input),
        ordinal: if input.ordinal {
            ordinal_table(input.features, &labels)
        } else {
            vec![]
        },
        correlations: correlations(input.features, &labels),
        aggregation: run_aggregation_grid(&claims, &labels).ok(),
        moderator_lag: moderator_lag(&lag_input, input.max_lag, LagSource::Human),
        label_distribution: label_distribution(input),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

pub const REPORT_FILES: [&str; 8] = [
    "agreement.csv",
    "ordinal_aic.csv",
    "mae_vs_human.csv",
    "condition_mae.csv",
    "correlations.csv",
    "aggregation_heatmap.csv",
    "moderator_lag.csv",
    "label_distribution.csv",
];

/// Report files by name. Every file is always present; empty tables keep
/// their header.
pub fn render(s: &StatsBundle) -> Vec<(String, String)> {
    let mut agreement =
        String::from("session,variant,annotators,status,mean_qwk,krippendorff_alpha,dropped\n");
    for r in &s.agreement {
        let v = match r.variant {
            RatingVariant::Info => "info",
            RatingVariant::Mix => "aspects",
        };
        let (status, q, a, dropped) = match &r.report {
            Some(rep) => (
                serde_json::to_value(rep.status)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
                opt(rep.mean_qwk),
                opt(rep.krippendorff_alpha),
                rep.dropped.join(";"),
            ),
            None => (
                "unusable".into(),
                String::new(),
                String::new(),
                String::new(),
            ),
        };
        writeln!(
            agreement,
            "{},{v},{},{status},{q},{a},{dropped}",
            r.session, r.annotators
        )
        .unwrap();
    }

    let mut aic = String::from("feature,n,aic_null,aic,delta_aic,coefficient,converged\n");
    for r in &s.ordinal {
        let conv = r.converged.map(|c| c.to_string()).unwrap_or_default();
        writeln!(
            aic,
            "{},{},{},{},{},{},{conv}",
            r.feature,
            r.n,
            opt(r.aic_null),
            opt(r.aic),
            opt(r.delta_aic),
            opt(r.coefficient)
        )
        .unwrap();
    }

    let mut mae = String::from("source,dimension,mae_mean,mae_std,n\n");
    for r in &s.mae_vs_human {
        writeln!(
            mae,
            "{},{},{},{},{}",
            r.source,
            r.dimension.as_str(),
            fmt_f(r.mean),
            fmt_f(r.std),
            r.n
        )
        .unwrap();
    }

    let mut cond = String::from("condition,reference,dimension,mae_mean,mae_std,runs\n");
    for r in &s.condition_mae {
        writeln!(
            cond,
            "{},{},{},{},{},{}",
            r.condition,
            r.reference,
            r.dimension,
            fmt_f(r.mean),
            fmt_f(r.std),
            r.runs
        )
        .unwrap();
    }

    let mut corr = String::from("rank,feature,r,abs_r,n\n");
    for (i, r) in s.correlations.iter().enumerate() {
        writeln!(
            corr,
            "{},{},{},{},{}",
            i + 1,
            r.feature,
            opt(r.r),
            opt(r.abs_r),
            r.n
        )
        .unwrap();
    }

    let heat = match &s.aggregation {
        Some(g) => g.to_csv(),
        None => {
            let mut h = String::from("claim_op");
            for a in crate::rating::AspectOp::ALL {
                h.push(',');
                h.push_str(a.as_str());
            }
            h.push('\n');
            h
        }
    };

    let mut lag = String::from("act,lag,n,mean_cig,corpus_mean_cig,coverage_pct\n");
    let p = &s.moderator_lag;
    for c in &p.cells {
        let cov = p.coverage_pct.get(&c.act).copied();
        writeln!(
            lag,
            "{},{},{},{},{},{}",
            c.act.as_str(),
            c.lag,
            c.n,
            fmt_f(c.mean_cig),
            opt(p.corpus_mean_cig),
            opt(cov)
        )
        .unwrap();
    }

    let mut dist = String::from("source,dimension,level,count,share\n");
    for r in &s.label_distribution {
        writeln!(
            dist,
            "{},{},{},{},{}",
            r.source,
            r.dimension.as_str(),
            r.level,
            r.count,
            fmt_f(r.share)
        )
        .unwrap();
    }

    REPORT_FILES
        .iter()
        .map(|n| n.to_string())
        .zip([agreement, aic, mae, cond, corr, heat, lag, dist])
        .collect()
}
