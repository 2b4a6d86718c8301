//! Proportional-odds cumulative-logit regression fitted by damped Newton.
//!
//! P(Y ≤ j | x) = σ(θ_j − x·β), j = 1..K−1. Categories never observed are
//! compressed away before fitting, so K counts observed levels only.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_OBSERVATIONS: usize = 20;
pub const GRAD_TOL: f64 = 1e-8;
const MAX_ITER: usize = 500;
const SEPARATION_LL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalModelFit {
    pub label: String,
    pub predictors: Vec<String>,
    /// Observed levels, ascending; thresholds sit between consecutive ones.
    pub categories: Vec<u8>,
    pub thresholds: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub log_likelihood: f64,
    pub aic: f64,
    pub k: usize,
    pub n: usize,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic density σ(z)(1−σ(z)) and its derivative.
fn density(z: f64) -> (f64, f64) {
    let s = sigmoid(z);
    let f = s * (1.0 - s);
    (f, f * (1.0 - 2.0 * s))
}

struct Problem<'a> {
    y: Vec<usize>,
    x: &'a [Vec<f64>],
    k: usize,
    p: usize,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        self.k - 1 + self.p
    }

    fn eta(&self, i: usize, beta: &[f64]) -> f64 {
        self.x[i].iter().zip(beta).map(|(a, b)| a * b).sum()
    }

    fn log_lik(&self, params: &[f64]) -> f64 {
        let (theta, beta) = params.split_at(self.k - 1);
        let mut ll = 0.0;
        for i in 0..self.y.len() {
            let c = self.y[i];
            let eta = self.eta(i, beta);
            let upper = if c < self.k - 1 {
                sigmoid(theta[c] - eta)
            } else {
                1.0
            };
            let lower = if c > 0 {
                sigmoid(theta[c - 1] - eta)
            } else {
                0.0
            };
            let prob = upper - lower;
            if prob <= 0.0 {
                return f64::NEG_INFINITY;
            }
            ll += prob.ln();
        }
        ll
    }

    /// Gradient and Hessian of the log-likelihood.
    fn derivatives(&self, params: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let (theta, beta) = params.split_at(self.k - 1);
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        let mut va = DVector::zeros(d);
        let mut vb = DVector::zeros(d);
        for i in 0..self.y.len() {
            let c = self.y[i];
            let eta = self.eta(i, beta);
            va.fill(0.0);
            vb.fill(0.0);
            let (mut fa, mut fpa, mut fb, mut fpb) = (0.0, 0.0, 0.0, 0.0);
            let mut prob = 0.0;
            if c < self.k - 1 {
                let a = theta[c] - eta;
                (fa, fpa) = density(a);
                prob += sigmoid(a);
                va[c] = 1.0;
                for j in 0..self.p {
                    va[self.k - 1 + j] = -self.x[i][j];
                }
            } else {
                prob += 1.0;
            }
            if c > 0 {
                let b = theta[c - 1] - eta;
                (fb, fpb) = density(b);
                prob -= sigmoid(b);
                vb[c - 1] = 1.0;
                for j in 0..self.p {
                    vb[self.k - 1 + j] = -self.x[i][j];
                }
            }
            let dp = &va * fa - &vb * fb;
            g += &dp / prob;
            let d2p = &va * va.transpose() * fpa - &vb * vb.transpose() * fpb;
            h += d2p / prob - &dp * dp.transpose() / (prob * prob);
        }
        (g, h)
    }
}

/// Z-scores a column with population standard deviation; constant columns
/// become zeros.
pub fn standardize(column: &[f64]) -> Vec<f64> {
    let n = column.len() as f64;
    let m = column.iter().sum::<f64>() / n;
    let sd = (column.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    column
        .iter()
        .map(|v| if sd > 0.0 { (v - m) / sd } else { 0.0 })
        .collect()
}

/// Fits the model. `x[i]` is the predictor row of observation `i`;
/// `predictors` names the columns. Non-convergence is reported in the fit;
/// complete separation (likelihood driven to one) counts as non-convergence.
pub fn fit_ordinal(
    labels: &[u8],
    x: &[Vec<f64>],
    predictors: &[&str],
    label: &str,
) -> Result<OrdinalModelFit> {
    let n = labels.len();
    if n < MIN_OBSERVATIONS {
        return Err(Error::validation(format!(
            "ordinal fit needs at least {MIN_OBSERVATIONS} observations, got {n}"
        )));
    }
    if x.len() != n || x.iter().any(|r| r.len() != predictors.len()) {
        return Err(Error::validation(
            "predictor matrix does not match labels and predictor names",
        ));
    }
    let mut categories: Vec<u8> = labels.to_vec();
    categories.sort_unstable();
    categories.dedup();
    let k = categories.len();
    if k < 2 {
        return Err(Error::validation(
            "ordinal fit needs at least two observed levels",
        ));
    }
    let y: Vec<usize> = labels
        .iter()
        .map(|l| categories.binary_search(l).expect("from labels"))
        .collect();
    let prob = Problem {
        y,
        x,
        k,
        p: predictors.len(),
    };

    let mut params = vec![0.0; prob.dim()];
    let mut cum = 0usize;
    for (j, t) in params.iter_mut().take(k - 1).enumerate() {
        cum += prob.y.iter().filter(|&&c| c == j).count();
        let q = cum as f64 / n as f64;
        *t = (q / (1.0 - q)).ln();
    }
    let mut ll = prob.log_lik(&params);
    let mut lambda = 1e-6;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    while iterations < MAX_ITER {
        let (g, h) = prob.derivatives(&params);
        grad_norm = g.norm();
        if grad_norm < GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let neg_h = -h;
        let mut accepted = false;
        for _ in 0..60 {
            let damped = &neg_h + DMatrix::identity(prob.dim(), prob.dim()) * lambda;
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&g);
            let trial: Vec<f64> = params.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let ordered = trial[..k - 1].windows(2).all(|w| w[0] < w[1]);
            let trial_ll = if ordered {
                prob.log_lik(&trial)
            } else {
                f64::NEG_INFINITY
            };
            if trial_ll >= ll - 1e-12 * ll.abs().max(1.0) && trial_ll.is_finite() {
                params = trial;
                ll = trial_ll;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    if ll > -SEPARATION_LL {
        converged = false;
    }
    let dim = prob.dim();
    let (thresholds, coefficients) = params.split_at(k - 1);
    Ok(OrdinalModelFit {
        label: label.into(),
        predictors: predictors.iter().map(|s| s.to_string()).collect(),
        categories,
        thresholds: thresholds.to_vec(),
        coefficients: coefficients.to_vec(),
        log_likelihood: ll,
        aic: 2.0 * dim as f64 - 2.0 * ll,
        k: dim,
        n,
        converged,
        iterations,
        grad_norm,
    })
}

/// Rounds a mean rating to the nearest level, halves upward.
pub fn round_label(mean: f64) -> u8 {
    ((mean + 0.5).floor() as i64).clamp(1, 4) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn logistic(rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
        (u / (1.0 - u)).ln()
    }

    fn simulate(n: usize, beta: f64, seed: u64) -> (Vec<u8>, Vec<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cuts = [-1.0, 0.5, 2.0];
        let mut labels = Vec::with_capacity(n);
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = StandardNormal.sample(&mut rng);
            let latent = beta * x + logistic(&mut rng);
            labels.push(1 + cuts.iter().filter(|c| latent > **c).count() as u8);
            xs.push(x);
        }
        (labels, xs)
    }

    #[test]
    fn separated_data_is_not_converged() {
        let labels: Vec<u8> = (0..24).map(|i| 1 + (i / 8) as u8).collect();
        let x: Vec<Vec<f64>> = (0..24).map(|i| vec![i as f64]).collect();
        let fit = fit_ordinal(&labels, &x, &["x"], "sep").unwrap();
        assert!(!fit.converged);
        assert!(fit.log_likelihood > -1e-3);
    }

    #[test]
    fn intercept_only_matches_closed_form() {
        let labels: Vec<u8> = [1u8; 7]
            .into_iter()
            .chain([2; 11])
            .chain([3; 5])
            .chain([4; 9])
            .collect();
        let x: Vec<Vec<f64>> = vec![vec![]; labels.len()];
        let fit = fit_ordinal(&labels, &x, &[], "null").unwrap();
        let n = labels.len() as f64;
        let ll: f64 = [7.0f64, 11.0, 5.0, 9.0]
            .iter()
            .map(|c| c * (c / n).ln())
            .sum();
        assert!(fit.converged);
        assert!((fit.log_likelihood - ll).abs() < 1e-6);
        assert!((fit.aic - (2.0 * 3.0 - 2.0 * ll)).abs() < 1e-6);
        assert!(fit.thresholds.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn empty_categories_are_compressed() {
        let labels: Vec<u8> = [1u8; 10].into_iter().chain([4; 15]).collect();
        let fit = fit_ordinal(&labels, &vec![vec![]; 25], &[], "null").unwrap();
        assert_eq!(fit.categories, [1, 4]);
        assert_eq!((fit.thresholds.len(), fit.k), (1, 1));
        let ll = 10.0 * (0.4f64).ln() + 15.0 * (0.6f64).ln();
        assert!((fit.log_likelihood - ll).abs() < 1e-6);
    }

    #[test]
    fn recovers_generating_slope() {
        let (labels, xs) = simulate(5000, 1.5, 21);
        let x: Vec<Vec<f64>> = xs.iter().map(|v| vec![*v]).collect();
        let fit = fit_ordinal(&labels, &x, &["x"], "sim").unwrap();
        assert!(fit.converged && fit.grad_norm < GRAD_TOL);
        assert!(
            (fit.coefficients[0] - 1.5).abs() < 0.15,
            "{}",
            fit.coefficients[0]
        );
    }

    #[test]
    fn nested_and_duplicated_predictors() {
        let (labels, xs) = simulate(400, 1.0, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<f64> = (0..400).map(|_| StandardNormal.sample(&mut rng)).collect();
        let base = fit_ordinal(
            &labels,
            &xs.iter().map(|v| vec![*v]).collect::<Vec<_>>(),
            &["x"],
            "base",
        )
        .unwrap();
        let sup = fit_ordinal(
            &labels,
            &xs.iter()
                .zip(&noise)
                .map(|(a, b)| vec![*a, *b])
                .collect::<Vec<_>>(),
            &["x", "z"],
            "sup",
        )
        .unwrap();
        let dup = fit_ordinal(
            &labels,
            &xs.iter().map(|v| vec![*v, *v]).collect::<Vec<_>>(),
            &["x", "x2"],
            "dup",
        )
        .unwrap();
        assert!(sup.log_likelihood >= base.log_likelihood - 1e-6);
        assert!(dup.aic >= base.aic - 2.0 * 1e-6);
        assert!((dup.log_likelihood - base.log_likelihood).abs() < 1e-6);
        let null = fit_ordinal(&labels, &vec![vec![]; 400], &[], "null").unwrap();
        assert!(base.log_likelihood >= null.log_likelihood - 1e-6);
    }

    #[test]
    fn rejects_small_samples_and_single_level() {
        assert!(fit_ordinal(&[1; 5], &vec![vec![]; 5], &[], "x").is_err());
        assert!(fit_ordinal(&[2; 30], &vec![vec![]; 30], &[], "x").is_err());
    }

    #[test]
    fn label_rounding_and_standardize() {
        assert_eq!(
            [1.0, 1.5, 2.49, 2.5, 3.5, 4.0].map(round_label),
            [1, 2, 2, 3, 4, 4]
        );
        let z = standardize(&[1.0, 2.0, 3.0]);
        assert!((z[0] + 1.224_744_871_391_589).abs() < 1e-12 && z[1] == 0.0);
        assert_eq!(standardize(&[2.0, 2.0]), [0.0, 0.0]);
    }
}
