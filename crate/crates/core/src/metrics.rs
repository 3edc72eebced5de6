//! Accuracy, NLL, OOD scores, AUROC and the paired significance test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::numerics::{argmax, Matrix};

const LOG_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Baseline,
    Update,
    Retrain,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Update => "update",
            Phase::Retrain => "retrain",
        }
    }
}

/// One row of the benchmark CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub model: String,
    pub seed: u64,
    pub n_train: usize,
    pub phase: Phase,
    pub acc: f64,
    pub nll: f64,
    pub auroc_entropy: f64,
    pub auroc_variance: f64,
    pub time_update_s: Option<f64>,
    pub time_retrain_s: Option<f64>,
    pub time_predict_s: Option<f64>,
}

fn check_rows(probs: &Matrix, labels: &[usize]) -> Result<()> {
    if probs.rows() != labels.len() {
        return Err(Error::shape("metrics", probs.rows(), labels.len()));
    }
    if probs.rows() == 0 {
        return Err(Error::invalid("metrics need at least one sample"));
    }
    Ok(())
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_rows(probs, labels)?;
    let hits = labels.iter().enumerate().filter(|(r, &y)| argmax(probs.row(*r)) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean `−ln p(true class)`.
pub fn nll(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_rows(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs.get(r, y).max(LOG_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Shannon entropy of one probability row, `0·ln 0 = 0`.
pub fn entropy_score(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

pub fn entropy_scores(probs: &Matrix) -> Vec<f64> {
    (0..probs.rows()).map(|r| entropy_score(probs.row(r))).collect()
}

/// Weighted spread of member predictions for one sample, averaged over classes.
pub fn variance_score_mc(members: &[&[f64]], weights: &[f64]) -> f64 {
    let k = members.first().map_or(0, |m| m.len());
    if k == 0 {
        return 0.0;
    }
    let mut mean = vec![0.0; k];
    for (m, w) in members.iter().zip(weights) {
        for (a, p) in mean.iter_mut().zip(m.iter()) {
            *a += w * p;
        }
    }
    let mut var = 0.0;
    for (m, w) in members.iter().zip(weights) {
        for (a, p) in mean.iter().zip(m.iter()) {
            var += w * (p - a) * (p - a);
        }
    }
    var / k as f64
}

/// [`variance_score_mc`] for every row of member probability matrices.
pub fn variance_scores_mc(probs: &[Matrix], log_weights: &[f64]) -> Vec<f64> {
    let weights: Vec<f64> = log_weights.iter().map(|v| v.exp()).collect();
    let n = probs.first().map_or(0, Matrix::rows);
    (0..n)
        .map(|r| {
            let rows: Vec<&[f64]> = probs.iter().map(|p| p.row(r)).collect();
            variance_score_mc(&rows, &weights)
        })
        .collect()
}

/// Mean marginal variance of `Dirichlet(α)`.
pub fn variance_score_dirichlet(alpha: &[f64]) -> f64 {
    let a0: f64 = alpha.iter().sum();
    let total: f64 = alpha
        .iter()
        .map(|a| {
            let m = a / a0;
            m * (1.0 - m) / (a0 + 1.0)
        })
        .sum();
    total / alpha.len() as f64
}

/// Area under the ROC curve with OOD as the positive class (higher score is
/// more OOD), via the Mann-Whitney statistic with midranks.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::invalid("AUROC needs both ID and OOD scores"));
    }
    if id_scores.iter().chain(ood_scores).any(|s| s.is_nan()) {
        return Err(Error::NonFinite("auroc scores"));
    }
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let n_pos = ood_scores.len() as f64;
    let n_neg = id_scores.len() as f64;
    let u = rank_sum - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub significant: bool,
}

/// Upper tail `P(T > t)` of Student's t with `df` degrees of freedom.
pub fn student_t_upper_tail(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    1.0 - dist.cdf(t)
}

/// Paired one-sided t-test of `mean(a − b) > 0`.
pub fn paired_one_sided_ttest(a: &[f64], b: &[f64], alpha: f64) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::shape("paired_one_sided_ttest", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::invalid("the t-test needs at least two pairs"));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        let (t, p) = if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else if mean < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        return Ok(TTest { t, p, significant: mean > 0.0 });
    }
    let t = mean / (var / n).sqrt();
    let p = student_t_upper_tail(t, n - 1.0);
    Ok(TTest { t, p, significant: p < alpha })
}
