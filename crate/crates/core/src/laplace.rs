//! Last-layer Laplace posterior with Gauss-Newton online updates.
//!
//! The posterior over head weights is `N(μ̂, Σ̂)`. With `K = 2` the head is
//! collapsed to one difference column (binary mode); otherwise every class
//! column shares the covariance `Σ̂` (multiclass mode).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cholesky_psd, derive_stream, dot, logsumexp, sigmoid, softmax_in_place, JitterPolicy, Matrix};

/// Logit scaling constant of the mean-field approximation.
pub const MEAN_FIELD_C: f64 = std::f64::consts::PI / 8.0;
/// Floor for Laplace-bridge concentrations.
pub const ALPHA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Binary,
    Multiclass,
}

impl Mode {
    pub fn for_classes(k: usize) -> Self {
        if k == 2 {
            Mode::Binary
        } else {
            Mode::Multiclass
        }
    }

    /// Width of the mean matrix for `k` classes.
    pub fn width(self, k: usize) -> usize {
        match self {
            Mode::Binary => 1,
            Mode::Multiclass => k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplacePosterior {
    pub mean: Matrix,
    pub cov: Matrix,
    pub prior_precision: f64,
    pub mode: Mode,
    pub classes: usize,
}

/// Curvature weight `g` of one sample at logits `z` (mean-matrix width).
fn curvature(z: &[f64], mode: Mode) -> f64 {
    match mode {
        Mode::Binary => {
            let s = sigmoid(z[0]);
            s * (1.0 - s)
        }
        Mode::Multiclass => {
            let mut p = z.to_vec();
            softmax_in_place(&mut p);
            let top = p.iter().cloned().fold(0.0, f64::max);
            top * (1.0 - top)
        }
    }
}

/// Residuals `p(y|φ, μ) − δ(y = label)` per mean column.
fn residual(z: &[f64], label: usize, mode: Mode) -> Vec<f64> {
    match mode {
        Mode::Binary => vec![sigmoid(z[0]) - label as f64],
        Mode::Multiclass => {
            let mut p = z.to_vec();
            softmax_in_place(&mut p);
            p[label] -= 1.0;
            p
        }
    }
}

/// Negative log likelihood of one label at logits `z`.
fn sample_nll(z: &[f64], label: usize, mode: Mode) -> f64 {
    match mode {
        Mode::Binary => {
            // softplus(z) − y z, computed without overflow
            let x = z[0];
            let softplus = x.max(0.0) + (-x.abs()).exp().ln_1p();
            softplus - label as f64 * x
        }
        Mode::Multiclass => logsumexp(z) - z[label],
    }
}

fn logits(features: &Matrix, mean: &Matrix) -> Result<Matrix> {
    features.matmul(mean)
}

fn check_labels(labels: &[usize], k: usize, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("labels", rows, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Inverse Gauss-Newton Hessian after observing `features` (rows `φᵢ`), by a
/// chain of Sherman-Morrison downdates with `gᵢ` evaluated at `mean`.
pub fn inv_hessian_step(mean: &Matrix, cov: &Matrix, features: &Matrix, mode: Mode) -> Result<Matrix> {
    let d = cov.rows();
    if cov.cols() != d || mean.rows() != d || features.cols() != d {
        return Err(Error::shape("inv_hessian_step", d, features.cols()));
    }
    if mode == Mode::Binary && mean.cols() != 1 {
        return Err(Error::shape("inv_hessian_step", "1 mean column", mean.cols()));
    }
    if (0..d).any(|i| !(cov.get(i, i) > 0.0)) || !cov.is_finite() {
        return Err(Error::NotPsd { jitter: 0.0 });
    }
    let z = logits(features, mean)?;
    let mut out = cov.clone();
    for i in 0..features.rows() {
        let g = curvature(z.row(i), mode);
        if !g.is_finite() {
            return Err(Error::NonFinite("inv_hessian_step curvature"));
        }
        if g == 0.0 {
            continue;
        }
        let phi = features.row(i);
        let u = out.matvec(phi)?;
        let q = dot(phi, &u);
        let denom = 1.0 + g * q;
        if !(q >= 0.0) || !(denom > 0.0) {
            return Err(Error::NotPsd { jitter: 0.0 });
        }
        out.rank1_update(-g / denom, &u, &u);
    }
    out.symmetrize();
    Ok(out)
}

impl LaplacePosterior {
    /// Prior `N(0, λ⁻¹I)` over a `d`-dimensional head for `k` classes.
    pub fn prior(d: usize, k: usize, prior_precision: f64) -> Result<Self> {
        if !(prior_precision > 0.0) || !prior_precision.is_finite() {
            return Err(Error::invalid("prior precision must be positive"));
        }
        if k < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        let mode = Mode::for_classes(k);
        Ok(LaplacePosterior {
            mean: Matrix::zeros(d, mode.width(k)),
            cov: Matrix::scaled_identity(d, 1.0 / prior_precision),
            prior_precision,
            mode,
            classes: k,
        })
    }

    pub fn dim(&self) -> usize {
        self.cov.rows()
    }

    /// Posterior around trained head weights `head` (`D×K`) given the training
    /// features. A two-column head becomes the column difference `w₁ − w₀`.
    pub fn fit(head: &Matrix, prior_precision: f64, features: &Matrix) -> Result<Self> {
        let k = head.cols();
        let mut post = Self::prior(head.rows(), k, prior_precision)?;
        post.mean = match post.mode {
            Mode::Binary => {
                let diff: Vec<f64> = (0..head.rows()).map(|r| head.get(r, 1) - head.get(r, 0)).collect();
                Matrix::column(&diff)
            }
            Mode::Multiclass => head.clone(),
        };
        post.cov = inv_hessian_step(&post.mean, &post.cov, features, post.mode)?;
        Ok(post)
    }

    /// Posterior from a MAP mean already in mode width.
    pub fn from_map(mean: Matrix, classes: usize, prior_precision: f64, features: &Matrix) -> Result<Self> {
        let mut post = Self::prior(mean.rows(), classes, prior_precision)?;
        if mean.cols() != post.mode.width(classes) {
            return Err(Error::shape("LaplacePosterior::from_map", post.mode.width(classes), mean.cols()));
        }
        post.cov = inv_hessian_step(&mean, &post.cov, features, post.mode)?;
        post.mean = mean;
        Ok(post)
    }

    /// Gauss-Newton update on new data.
    ///
    /// Every step minimizes the quadratic model of
    /// `½(μ − μ̂)ᵀΣ̂⁻¹(μ − μ̂) + Σ NLL` at the current iterate, using the
    /// pre-update `Σ̂` and curvature at the iterate. The first step is
    /// `μ̂ − H⁻¹ Σ rᵢ φᵢ`; later steps keep the prior pull toward `μ̂`. The
    /// covariance is committed once, at the final mean.
    pub fn update(&self, features: &Matrix, labels: &[usize], steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("update needs at least one step"));
        }
        if features.rows() == 0 {
            return Err(Error::invalid("update needs at least one new sample"));
        }
        if features.cols() != self.dim() {
            return Err(Error::shape("LaplacePosterior::update", self.dim(), features.cols()));
        }
        check_labels(labels, self.classes, features.rows())?;
        let mut mu = self.mean.clone();
        for _ in 0..steps {
            let h_inv = inv_hessian_step(&mu, &self.cov, features, self.mode)?;
            mu = newton_target(&self.mean, &mu, &h_inv, features, labels, self.mode)?;
        }
        let cov = inv_hessian_step(&mu, &self.cov, features, self.mode)?;
        Ok(LaplacePosterior {
            mean: mu,
            cov,
            prior_precision: self.prior_precision,
            mode: self.mode,
            classes: self.classes,
        })
    }

    /// Per-row logit means (mode width) and the shared logit variance `φᵀΣ̂φ`.
    pub fn logit_moments(&self, features: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        if features.cols() != self.dim() {
            return Err(Error::shape("LaplacePosterior::logit_moments", self.dim(), features.cols()));
        }
        let means = logits(features, &self.mean)?;
        let proj = features.matmul(&self.cov)?;
        let var = (0..features.rows())
            .map(|r| dot(proj.row(r), features.row(r)).max(0.0))
            .collect();
        Ok((means, var))
    }

    /// Mean-field predictive `softmax(m / √(1 + c·v))` for every row.
    pub fn predict_mean_field(&self, features: &Matrix) -> Result<Matrix> {
        let (means, var) = self.logit_moments(features)?;
        Ok(mean_field_probs(&means, &var, self.mode, self.classes))
    }

    /// Laplace-bridge Dirichlet concentrations per row (multiclass only).
    pub fn laplace_bridge(&self, features: &Matrix) -> Result<Matrix> {
        if self.mode != Mode::Multiclass {
            return Err(Error::invalid("the Laplace bridge needs a multiclass posterior"));
        }
        let (means, var) = self.logit_moments(features)?;
        let mut out = Matrix::zeros(features.rows(), self.classes);
        for r in 0..features.rows() {
            let alpha = bridge_alpha(means.row(r), var[r])?;
            out.row_mut(r).copy_from_slice(&alpha);
        }
        Ok(out)
    }

    /// `m` weight draws `μ̂ + L z` (mode width), deterministic per seed.
    pub fn sample_members(&self, m: usize, seed: u64) -> Result<Vec<Matrix>> {
        if m == 0 {
            return Ok(Vec::new());
        }
        let chol = cholesky_psd(&self.cov, JitterPolicy::Ladder)?;
        let d = self.dim();
        let width = self.mean.cols();
        let mut rng = derive_stream(seed, "laplace-members");
        let mut out = Vec::with_capacity(m);
        let mut z = Matrix::zeros(d, width);
        for _ in 0..m {
            rng.fill_normal(z.as_mut_slice());
            let mut w = chol.lower.matmul(&z)?;
            for (wv, mv) in w.as_mut_slice().iter_mut().zip(self.mean.as_slice()) {
                *wv += mv;
            }
            out.push(w);
        }
        Ok(out)
    }
}

/// Mean-field class probabilities from per-row logit means and variances.
pub fn mean_field_probs(means: &Matrix, var: &[f64], mode: Mode, classes: usize) -> Matrix {
    let mut out = Matrix::zeros(means.rows(), classes);
    for r in 0..means.rows() {
        let s = (1.0 + MEAN_FIELD_C * var[r]).sqrt();
        let row = out.row_mut(r);
        match mode {
            Mode::Binary => {
                let p = sigmoid(means.get(r, 0) / s);
                row[0] = 1.0 - p;
                row[1] = p;
            }
            Mode::Multiclass => {
                for (o, m) in row.iter_mut().zip(means.row(r)) {
                    *o = m / s;
                }
                softmax_in_place(row);
            }
        }
    }
    out
}

/// `μ̂ + H⁻¹ Σᵢ [gᵢ φᵢᵀ(μ_t − μ̂) − rᵢ(μ_t)] φᵢ`, per mean column.
fn newton_target(
    anchor: &Matrix,
    current: &Matrix,
    h_inv: &Matrix,
    features: &Matrix,
    labels: &[usize],
    mode: Mode,
) -> Result<Matrix> {
    let z = logits(features, current)?;
    let delta = current.sub(anchor)?;
    let shift = logits(features, &delta)?;
    let mut coef = Matrix::zeros(features.rows(), current.cols());
    for i in 0..features.rows() {
        let g = curvature(z.row(i), mode);
        let r = residual(z.row(i), labels[i], mode);
        for (c, out) in coef.row_mut(i).iter_mut().enumerate() {
            *out = g * shift.get(i, c) - r[c];
        }
    }
    if !coef.is_finite() {
        return Err(Error::NonFinite("Gauss-Newton residuals"));
    }
    let rhs = features.t_matmul(&coef)?;
    h_inv.matmul(&rhs)?.add(anchor)
}

/// Regularized negative log posterior `Σ NLL + (λ/2)‖μ‖²` (mode width mean).
pub fn map_objective(features: &Matrix, labels: &[usize], mean: &Matrix, prior_precision: f64, mode: Mode) -> Result<f64> {
    let z = logits(features, mean)?;
    let nll: f64 = (0..features.rows()).map(|i| sample_nll(z.row(i), labels[i], mode)).sum();
    let reg = 0.5 * prior_precision * mean.as_slice().iter().map(|v| v * v).sum::<f64>();
    Ok(nll + reg)
}

/// Regularized MAP by Gauss-Newton iterations from the prior mean, halving the
/// step whenever the objective would increase.
pub fn fit_map_irls(
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    prior_precision: f64,
    max_steps: usize,
    tol: f64,
) -> Result<Matrix> {
    let prior = LaplacePosterior::prior(features.cols(), classes, prior_precision)?;
    check_labels(labels, classes, features.rows())?;
    let mode = prior.mode;
    let mut mu = prior.mean.clone();
    let mut obj = map_objective(features, labels, &mu, prior_precision, mode)?;
    let mut change = f64::INFINITY;
    for _ in 0..max_steps {
        let h_inv = inv_hessian_step(&mu, &prior.cov, features, mode)?;
        let target = newton_target(&prior.mean, &mu, &h_inv, features, labels, mode)?;
        let step = target.sub(&mu)?;
        let mut scale = 1.0;
        let mut next = target;
        let mut next_obj = map_objective(features, labels, &next, prior_precision, mode)?;
        let slack = 1e-12 * obj.abs().max(1.0);
        while next_obj > obj + slack && scale > 1e-10 {
            scale *= 0.5;
            next = mu.add(&step.scaled(scale))?;
            next_obj = map_objective(features, labels, &next, prior_precision, mode)?;
        }
        // Convergence is judged on the full Newton step, not the damped one.
        change = step.as_slice().iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        mu = next;
        obj = next_obj.min(obj);
        if change < tol {
            return Ok(mu);
        }
    }
    Err(Error::NonConvergence {
        steps: max_steps,
        last_change: change,
        last_iterate: mu.into_vec(),
    })
}

/// Dirichlet concentrations matching logits `N(m, v·I)`.
pub fn bridge_alpha(m: &[f64], v: f64) -> Result<Vec<f64>> {
    if !(v > 0.0) {
        return Err(Error::invalid(format!("Laplace bridge needs positive variance, got {v}")));
    }
    let k = m.len() as f64;
    // Shifting all logits leaves α unchanged; centering keeps the exponentials finite.
    let center = m.iter().sum::<f64>() / k;
    let sum_neg: f64 = m.iter().map(|x| (-(x - center)).exp()).sum();
    Ok(m.iter()
        .map(|x| {
            let a = (1.0 - 2.0 / k + (x - center).exp() * sum_neg / (k * k)) / v;
            a.max(ALPHA_FLOOR)
        })
        .collect())
}
