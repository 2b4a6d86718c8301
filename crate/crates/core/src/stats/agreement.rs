//! Inter-rater agreement: ordinal Krippendorff's α, quadratic weighted kappa
//! and the per-session quality-control rule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEVELS: usize = 4;

/// Ordinal α over a sources × items matrix of levels 1..=4. Items with fewer
/// than two ratings are not pairable and are ignored.
pub fn krippendorff_alpha_ordinal(matrix: &[Vec<Option<u8>>]) -> Result<f64> {
    let items = matrix.iter().map(Vec::len).max().unwrap_or(0);
    let mut o = [[0.0f64; LEVELS]; LEVELS];
    for i in 0..items {
        let values: Vec<usize> = matrix
            .iter()
            .filter_map(|row| row.get(i).copied().flatten())
            .map(|v| {
                if !(1..=LEVELS as u8).contains(&v) {
                    return Err(Error::validation(format!("level {v} outside 1..={LEVELS}")));
                }
                Ok(v as usize - 1)
            })
            .collect::<Result<_>>()?;
        let m = values.len();
        if m < 2 {
            continue;
        }
        for (a, &c) in values.iter().enumerate() {
            for (b, &k) in values.iter().enumerate() {
                if a != b {
                    o[c][k] += 1.0 / (m - 1) as f64;
                }
            }
        }
    }
    let nc: Vec<f64> = (0..LEVELS).map(|c| o[c].iter().sum()).collect();
    let n: f64 = nc.iter().sum();
    if n == 0.0 {
        return Err(Error::validation("no pairable items"));
    }
    let delta = |c: usize, k: usize| {
        let (lo, hi) = (c.min(k), c.max(k));
        let s: f64 = nc[lo..=hi].iter().sum::<f64>() - (nc[c] + nc[k]) / 2.0;
        s * s
    };
    let (mut d_o, mut d_e) = (0.0, 0.0);
    for c in 0..LEVELS {
        for k in 0..LEVELS {
            d_o += o[c][k] * delta(c, k);
            d_e += nc[c] * nc[k] * delta(c, k);
        }
    }
    d_o /= n;
    d_e /= n * (n - 1.0);
    if d_e == 0.0 {
        return Ok(if d_o == 0.0 { 1.0 } else { f64::NAN });
    }
    Ok(1.0 - d_o / d_e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Qwk {
    pub kappa: f64,
    /// One or both raters used a single level.
    pub degenerate: bool,
}

/// Quadratic weighted kappa on levels 1..=4. When both observed and expected
/// weighted disagreement vanish, κ is 1.
pub fn qwk(a: &[u8], b: &[u8]) -> Result<Qwk> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::validation(format!(
            "kappa needs equal non-empty inputs, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let mut obs = [[0.0f64; LEVELS]; LEVELS];
    for (&x, &y) in a.iter().zip(b) {
        if !(1..=LEVELS as u8).contains(&x) || !(1..=LEVELS as u8).contains(&y) {
            return Err(Error::validation(format!("level outside 1..={LEVELS}")));
        }
        obs[x as usize - 1][y as usize - 1] += 1.0 / n;
    }
    let ra: Vec<f64> = (0..LEVELS).map(|i| obs[i].iter().sum()).collect();
    let rb: Vec<f64> = (0..LEVELS)
        .map(|j| (0..LEVELS).map(|i| obs[i][j]).sum())
        .collect();
    let (mut wo, mut we) = (0.0, 0.0);
    for i in 0..LEVELS {
        for j in 0..LEVELS {
            let w = ((i as f64 - j as f64) / (LEVELS - 1) as f64).powi(2);
            wo += w * obs[i][j];
            we += w * ra[i] * rb[j];
        }
    }
    let single = |m: &[f64]| m.iter().filter(|p| **p > 0.0).count() == 1;
    let degenerate = single(&ra) || single(&rb);
    let kappa = if we == 0.0 { 1.0 } else { 1.0 - wo / we };
    Ok(Qwk { kappa, degenerate })
}

pub const QWK_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcStatus {
    Accepted,
    NeedsThird,
    Unusable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairQwk {
    pub a: String,
    pub b: String,
    pub kappa: f64,
    pub shared_items: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub status: QcStatus,
    pub pairwise: Vec<PairQwk>,
    pub mean_qwk: Option<f64>,
    pub dropped: Vec<String>,
    pub survivors: Vec<String>,
    /// α over the survivors; `None` when nothing is pairable.
    pub krippendorff_alpha: Option<f64>,
}

/// Ratings of one session: annotator → item → level.
pub type SessionRatings = BTreeMap<String, BTreeMap<String, u8>>;

fn pair_qwk(ratings: &SessionRatings, a: &str, b: &str) -> Result<Option<PairQwk>> {
    let (ra, rb) = (&ratings[a], &ratings[b]);
    let shared: Vec<(u8, u8)> = ra
        .iter()
        .filter_map(|(k, &x)| rb.get(k).map(|&y| (x, y)))
        .collect();
    if shared.is_empty() {
        return Ok(None);
    }
    let (xa, xb): (Vec<u8>, Vec<u8>) = shared.iter().copied().unzip();
    let q = qwk(&xa, &xb)?;
    Ok(Some(PairQwk {
        a: a.into(),
        b: b.into(),
        kappa: q.kappa,
        shared_items: shared.len(),
        degenerate: q.degenerate,
    }))
}

fn pairwise(ratings: &SessionRatings, who: &[String]) -> Result<Vec<PairQwk>> {
    let mut out = Vec::new();
    for (i, a) in who.iter().enumerate() {
        for b in &who[i + 1..] {
            out.extend(pair_qwk(ratings, a, b)?);
        }
    }
    Ok(out)
}

fn mean_of(pairs: &[PairQwk], who: Option<&str>) -> Option<f64> {
    let ks: Vec<f64> = pairs
        .iter()
        .filter(|p| who.is_none_or(|w| p.a == w || p.b == w))
        .map(|p| p.kappa)
        .collect();
    (!ks.is_empty()).then(|| ks.iter().sum::<f64>() / ks.len() as f64)
}

fn alpha_of(ratings: &SessionRatings, who: &[String]) -> Option<f64> {
    let items: Vec<&String> = who
        .iter()
        .flat_map(|a| ratings[a].keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let matrix: Vec<Vec<Option<u8>>> = who
        .iter()
        .map(|a| items.iter().map(|i| ratings[a].get(*i).copied()).collect())
        .collect();
    krippendorff_alpha_ordinal(&matrix).ok()
}

/// Two annotators below the kappa threshold need a third; with three or more
/// the annotator least in agreement with the rest is dropped.
pub fn quality_control(ratings: &SessionRatings) -> Result<AgreementReport> {
    let all: Vec<String> = ratings.keys().cloned().collect();
    let all_pairs = pairwise(ratings, &all)?;
    let mut survivors = all.clone();
    let mut dropped = Vec::new();
    let status = match all.len() {
        0 | 1 => QcStatus::Unusable,
        2 => match mean_of(&all_pairs, None) {
            None => QcStatus::Unusable,
            Some(m) if m < QWK_THRESHOLD => QcStatus::NeedsThird,
            Some(_) => QcStatus::Accepted,
        },
        _ => {
            let worst = all
                .iter()
                .filter_map(|a| mean_of(&all_pairs, Some(a)).map(|m| (a, m)))
                .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(y.0)));
            if let Some((w, _)) = worst {
                dropped.push(w.clone());
                survivors.retain(|a| a != w);
            }
            if pairwise(ratings, &survivors)?.is_empty() {
                QcStatus::Unusable
            } else {
                QcStatus::Accepted
            }
        }
    };
    let kept_pairs = pairwise(ratings, &survivors)?;
    Ok(AgreementReport {
        status,
        mean_qwk: mean_of(&kept_pairs, None),
        krippendorff_alpha: alpha_of(ratings, &survivors),
        pairwise: all_pairs,
        dropped,
        survivors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn m(rows: &[&[u8]]) -> Vec<Vec<Option<u8>>> {
        rows.iter()
            .map(|r| r.iter().map(|&v| (v > 0).then_some(v)).collect())
            .collect()
    }

    #[test]
    fn alpha_hand_fixture() {
        // Items (1,1), (2,3), (3,3). Coincidences o11=2, o23=o32=1, o33=2;
        // n = (2,1,3,0), n = 6. δ²(2,3) = (1+3-2)² = 4, δ²(1,2) = 2.25, δ²(1,3) = 12.25.
        // D_o = 8/6; D_e = 2(2·1·2.25 + 2·3·12.25 + 1·3·4)/30 = 6; α = 1 - (4/3)/6 = 7/9.
        let a = krippendorff_alpha_ordinal(&m(&[&[1, 2, 3], &[1, 3, 3]])).unwrap();
        assert!((a - 7.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_perfect_and_unpairable() {
        assert_eq!(
            krippendorff_alpha_ordinal(&m(&[&[1, 2, 4], &[1, 2, 4], &[1, 0, 4]])).unwrap(),
            1.0
        );
        assert_eq!(
            krippendorff_alpha_ordinal(&m(&[&[3, 3], &[3, 3]])).unwrap(),
            1.0
        );
        assert!(krippendorff_alpha_ordinal(&m(&[&[1, 0], &[0, 2]])).is_err());
    }

    #[test]
    fn alpha_near_zero_for_independent_raters() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<Option<u8>>> = (0..2)
            .map(|_| (0..10_000).map(|_| Some(rng.random_range(1..=4))).collect())
            .collect();
        let a = krippendorff_alpha_ordinal(&rows).unwrap();
        assert!(a.abs() < 0.05, "{a}");
    }

    #[test]
    fn qwk_examples() {
        assert_eq!(qwk(&[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap().kappa, 1.0);
        // Reversal: ΣwO = (9+1+1+9)/(9·4) = 5/9, ΣwE = (40/9)/16 = 5/18, κ = 1 - 2 = -1.
        assert!((qwk(&[1, 2, 3, 4], &[4, 3, 2, 1]).unwrap().kappa + 1.0).abs() < 1e-12);
        let q = qwk(&[2, 2, 2, 2], &[1, 2, 3, 4]).unwrap();
        assert!(q.degenerate && q.kappa.abs() < 1e-12);
        let q = qwk(&[3, 3], &[3, 3]).unwrap();
        assert!(q.degenerate && q.kappa == 1.0);
    }

    fn session(rows: &[(&str, &[u8])]) -> SessionRatings {
        rows.iter()
            .map(|(a, r)| {
                (
                    a.to_string(),
                    r.iter()
                        .enumerate()
                        .map(|(i, &v)| (format!("u{i}"), v))
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn qc_rules() {
        let good = session(&[("a", &[1, 2, 3, 4, 2, 3]), ("b", &[1, 2, 4, 4, 2, 3])]);
        assert_eq!(quality_control(&good).unwrap().status, QcStatus::Accepted);
        let bad = session(&[("a", &[1, 2, 3, 4, 2, 3]), ("b", &[3, 4, 1, 2, 3, 1])]);
        let r = quality_control(&bad).unwrap();
        assert_eq!(r.status, QcStatus::NeedsThird);
        assert!(r.mean_qwk.unwrap() < QWK_THRESHOLD);

        let three = session(&[
            ("a", &[1, 2, 3, 4, 2, 3]),
            ("b", &[1, 2, 4, 4, 2, 3]),
            ("c", &[4, 3, 1, 1, 4, 1]),
        ]);
        let r = quality_control(&three).unwrap();
        // oracle: the pairwise matrix; c has the lowest mean kappa to the others
        let k = |x: &[u8], y: &[u8]| qwk(x, y).unwrap().kappa;
        let (a, b, c) = (
            &[1, 2, 3, 4, 2, 3][..],
            &[1, 2, 4, 4, 2, 3][..],
            &[4, 3, 1, 1, 4, 1][..],
        );
        let means = [
            (k(a, b) + k(a, c)) / 2.0,
            (k(a, b) + k(b, c)) / 2.0,
            (k(a, c) + k(b, c)) / 2.0,
        ];
        assert!(means[2] < means[0] && means[2] < means[1]);
        assert_eq!(r.dropped, ["c"]);
        assert_eq!(r.survivors, ["a", "b"]);
        assert_eq!(r.status, QcStatus::Accepted);
        assert_eq!(
            quality_control(&session(&[("a", &[1])])).unwrap().status,
            QcStatus::Unusable
        );
    }

    proptest! {
        #[test]
        fn invariant_under_relabeling_and_reordering(rows in prop::collection::vec(prop::collection::vec(0u8..=4, 6), 2..5), seed in any::<u64>()) {
            let matrix = m(&rows.iter().map(Vec::as_slice).collect::<Vec<_>>());
            let base = krippendorff_alpha_ordinal(&matrix);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..6).collect();
            for i in (1..6).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let mut shuffled: Vec<Vec<Option<u8>>> = matrix.iter().map(|r| perm.iter().map(|&p| r[p]).collect()).collect();
            shuffled.reverse();
            match (base, krippendorff_alpha_ordinal(&shuffled)) {
                (Ok(x), Ok(y)) if x.is_nan() => prop_assert!(y.is_nan()),
                (Ok(x), Ok(y)) => { prop_assert!((x - y).abs() < 1e-12); prop_assert!(x <= 1.0 + 1e-12); }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn qwk_symmetric_and_bounded(pairs in prop::collection::vec((1u8..=4, 1u8..=4), 1..30)) {
            let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let x = qwk(&a, &b).unwrap().kappa;
            prop_assert!((x - qwk(&b, &a).unwrap().kappa).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&x));
        }
    }
}
