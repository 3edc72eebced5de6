//! Monte-Carlo Bayesian updates over a fixed set of member hypotheses.
//!
//! Members are treated as a categorical distribution. New data reweights
//! them by likelihood; predictions are the weighted mixture.

use crate::backbone::{member_seed, Backbone, Mode as ForwardMode};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::laplace::Mode;
use crate::numerics::{logsumexp, sigmoid, softmax_in_place, Matrix};

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// Per-member class probabilities, `[M][N×K]`.
pub type MemberProbs = Vec<Matrix>;

/// Where member predictions come from.
#[derive(Clone, Debug)]
pub enum MemberSource {
    /// Independently trained networks.
    Ensemble(Vec<Backbone>),
    /// Thinned copies of one network; member `j` uses mask seed `(seed, j)`.
    Dropout { net: Backbone, members: usize, seed: u64 },
    /// Last-layer weight samples (mode width); input is the feature matrix `φ`.
    Sampled { weights: Vec<Matrix>, mode: Mode, classes: usize },
}

impl MemberSource {
    pub fn len(&self) -> usize {
        match self {
            MemberSource::Ensemble(nets) => nets.len(),
            MemberSource::Dropout { members, .. } => *members,
            MemberSource::Sampled { weights, .. } => weights.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Class probabilities of every member on `input` (raw features, or `φ`
    /// for sampled last-layer weights).
    pub fn member_probs(&self, input: &Matrix, exec: Exec) -> Result<MemberProbs> {
        match self {
            MemberSource::Ensemble(nets) => exec.map(nets.len(), |j| nets[j].predict_proba(input)).into_iter().collect(),
            MemberSource::Dropout { net, members, seed } => net.dropout_member_probs(input, *members, *seed, exec),
            MemberSource::Sampled { weights, mode, classes } => {
                exec.map(weights.len(), |j| sampled_probs(input, &weights[j], *mode, *classes)).into_iter().collect()
            }
        }
    }

    /// Probabilities of member `j` only.
    pub fn single_member_probs(&self, j: usize, input: &Matrix) -> Result<Matrix> {
        match self {
            MemberSource::Ensemble(nets) => nets[j].predict_proba(input),
            MemberSource::Dropout { net, seed, .. } => {
                let mut logits = net.forward(input, ForwardMode::Member(member_seed(*seed, j)))?.logits;
                for r in 0..logits.rows() {
                    softmax_in_place(logits.row_mut(r));
                }
                Ok(logits)
            }
            MemberSource::Sampled { weights, mode, classes } => sampled_probs(input, &weights[j], *mode, *classes),
        }
    }
}

/// Softmax (or sigmoid) of `φ w` with no mean-field correction.
pub fn sampled_probs(features: &Matrix, w: &Matrix, mode: Mode, classes: usize) -> Result<Matrix> {
    let z = features.matmul(w)?;
    let mut out = Matrix::zeros(features.rows(), classes);
    for r in 0..z.rows() {
        let row = out.row_mut(r);
        match mode {
            Mode::Binary => {
                let p = sigmoid(z.get(r, 0));
                row[0] = 1.0 - p;
                row[1] = p;
            }
            Mode::Multiclass => {
                row.copy_from_slice(z.row(r));
                softmax_in_place(row);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct McEnsemble {
    pub source: MemberSource,
    pub log_weights: Vec<f64>,
}

impl McEnsemble {
    /// Uniform weights over the members.
    pub fn new(source: MemberSource) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::invalid("an ensemble needs at least one member"));
        }
        let log_weights = uniform_log_weights(source.len());
        Ok(McEnsemble { source, log_weights })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    /// Reweights on `(input, labels)` and returns the updated ensemble.
    pub fn update(&self, input: &Matrix, labels: &[usize], exec: Exec) -> Result<Self> {
        let probs = self.source.member_probs(input, exec)?;
        Ok(McEnsemble {
            source: self.source.clone(),
            log_weights: reweight(&self.log_weights, &probs, labels)?,
        })
    }

    pub fn predict(&self, input: &Matrix, exec: Exec) -> Result<Matrix> {
        predict_weighted(&self.source.member_probs(input, exec)?, &self.log_weights)
    }

    pub fn ess(&self) -> f64 {
        effective_sample_size(&self.log_weights)
    }
}

pub fn uniform_log_weights(m: usize) -> Vec<f64> {
    vec![-(m as f64).ln(); m]
}

/// `log ẑ_m = log w_m + Σ log p(y|x, w_m)`, renormalized.
pub fn reweight(log_weights: &[f64], probs: &[Matrix], labels: &[usize]) -> Result<Vec<f64>> {
    if probs.len() != log_weights.len() {
        return Err(Error::shape("reweight", log_weights.len(), probs.len()));
    }
    let mut all_floored = true;
    let mut out = Vec::with_capacity(log_weights.len());
    for (lw, p) in log_weights.iter().zip(probs) {
        if p.rows() != labels.len() {
            return Err(Error::shape("reweight", labels.len(), p.rows()));
        }
        let mut ll = 0.0;
        let mut member_floored = !labels.is_empty();
        for (r, &y) in labels.iter().enumerate() {
            if y >= p.cols() {
                return Err(Error::invalid(format!("label {y} out of range")));
            }
            let v = p.get(r, y);
            if v > PROB_FLOOR {
                member_floored = false;
            }
            ll += v.max(PROB_FLOOR).ln();
        }
        all_floored &= member_floored;
        out.push(lw + ll);
    }
    if all_floored {
        return Err(Error::PosteriorCollapse);
    }
    let norm = logsumexp(&out);
    if !norm.is_finite() {
        return Err(Error::PosteriorCollapse);
    }
    out.iter_mut().for_each(|v| *v -= norm);
    Ok(out)
}

/// Weighted mixture `Σ_m w_m p(y|x, w_m)`.
pub fn predict_weighted(probs: &[Matrix], log_weights: &[f64]) -> Result<Matrix> {
    if probs.len() != log_weights.len() || probs.is_empty() {
        return Err(Error::shape("predict_weighted", log_weights.len(), probs.len()));
    }
    let shape = probs[0].shape();
    let mut out = Matrix::zeros(shape.0, shape.1);
    for (p, lw) in probs.iter().zip(log_weights) {
        if p.shape() != shape {
            return Err(Error::shape("predict_weighted", format!("{shape:?}"), format!("{:?}", p.shape())));
        }
        let w = lw.exp();
        if w == 0.0 {
            continue;
        }
        for (o, v) in out.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// `1 / Σ w_m²`.
pub fn effective_sample_size(log_weights: &[f64]) -> f64 {
    1.0 / log_weights.iter().map(|lw| (2.0 * lw).exp()).sum::<f64>()
}
