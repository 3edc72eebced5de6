//! Residual MLP feature extractor with hand-written gradients.
//!
//! ```text
//! x ─ Linear(F→H) ─ ReLU ─┬─ Linear ─ ReLU ─ Dropout ─ Linear ─(+)─ … ─ head
//!                         └──────────────────────────────────────┘
//! ```
//!
//! The head reads either the hidden activations directly or random Fourier
//! features of them (SNGP). Spectral normalization, when enabled, bounds the
//! top singular value of every hidden weight matrix after each optimizer step.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::{derive_stream, norm2, softmax_in_place, Matrix, RngStream};
use crate::rff::RffMap;

pub const HIDDEN: usize = 128;
pub const BLOCKS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// Inverted-dropout rate inside each residual block; 0 disables dropout.
    pub dropout_rate: f64,
    /// Spectral-norm bound for hidden weights; `None` disables normalization.
    pub sn_bound: Option<f64>,
}

impl ArchConfig {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        ArchConfig {
            input_dim,
            classes,
            hidden: HIDDEN,
            blocks: BLOCKS,
            dropout_rate: 0.0,
            sn_bound: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes == 0 || self.hidden == 0 {
            return Err(Error::invalid("architecture dimensions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        if let Some(b) = self.sn_bound {
            if !(b > 0.0) {
                return Err(Error::invalid("spectral-norm bound must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub cosine_annealing: bool,
    /// Largest global gradient norm per step; larger gradients are rescaled.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.05,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            epochs: 200,
            batch_size: 32,
            cosine_annealing: true,
            grad_clip: Some(5.0),
        }
    }
}

impl OptimizerConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("optimizer needs lr > 0, epochs >= 1 and batch_size >= 1"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight decay must be nonnegative"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("gradient clip must be positive"));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine_annealing {
            let t = epoch as f64 / self.epochs as f64;
            self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            self.lr
        }
    }
}

/// How dropout behaves during a forward pass.
pub enum Mode<'a> {
    /// No dropout (equals the expected forward under inverted dropout).
    Deterministic,
    /// One fixed unit mask per block, shared by every row: a single thinned
    /// network, reproducible from the seed.
    Member(u64),
    /// Fresh masks per row drawn from the stream (training).
    Train(&'a mut RngStream),
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub hidden: Matrix,
    pub logits: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    arch: ArchConfig,
    /// Order: input.w, input.b, then per block w1, b1, w2, b2, then head.w, head.b.
    params: Vec<Matrix>,
    /// Power-iteration vectors, one per spectrally normalized weight.
    sn_state: Vec<Vec<f64>>,
    rff: Option<RffMap>,
    /// Penalty `λ/(2N)` on the head instead of the shared weight decay, so the
    /// trained head is the MAP under a `N(0, λ⁻¹I)` prior.
    head_prior_precision: Option<f64>,
}

/// Per-layer cache for the backward pass.
struct Tape {
    a0: Matrix,
    h: Vec<Matrix>,
    z1: Vec<Matrix>,
    masks: Vec<Option<Matrix>>,
    d: Vec<Matrix>,
    rff_z: Option<Matrix>,
    features: Matrix,
}

impl Backbone {
    /// He-initialized network with damped residual branches and zero biases.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = derive_stream(seed, "backbone-init");
        let gauss = |rng: &mut RngStream, fan_in: usize, fan_out: usize, gain: f64| {
            let s = (gain / fan_in as f64).sqrt();
            Matrix::from_fn(fan_in, fan_out, |_, _| s * rng.normal())
        };
        let hd = arch.hidden;
        // Residual branches start damped so the skip path dominates early on.
        let branch_gain = 2.0 / (arch.blocks.max(1) as f64).powi(2);
        let mut params = vec![gauss(&mut rng, arch.input_dim, hd, 2.0), Matrix::zeros(1, hd)];
        for _ in 0..arch.blocks {
            params.push(gauss(&mut rng, hd, hd, 2.0));
            params.push(Matrix::zeros(1, hd));
            params.push(gauss(&mut rng, hd, hd, branch_gain * 0.25));
            params.push(Matrix::zeros(1, hd));
        }
        params.push(gauss(&mut rng, hd, arch.classes, 1.0));
        params.push(Matrix::zeros(1, arch.classes));
        let sn_state = Self::sn_indices(&arch)
            .into_iter()
            .map(|i| {
                let mut u: Vec<f64> = (0..params[i].cols()).map(|_| rng.normal()).collect();
                let n = norm2(&u);
                u.iter_mut().for_each(|v| *v /= n);
                u
            })
            .collect();
        Ok(Backbone {
            arch,
            params,
            sn_state,
            rff: None,
            head_prior_precision: None,
        })
    }

    /// Replaces the head with one reading random Fourier features of the hidden
    /// layer (SNGP). The head has no trained bias.
    pub fn with_rff(mut self, rff: RffMap, head_prior_precision: f64, seed: u64) -> Result<Self> {
        if rff.input_dim() != self.arch.hidden {
            return Err(Error::shape("Backbone::with_rff", self.arch.hidden, rff.input_dim()));
        }
        let mut rng = derive_stream(seed, "backbone-head");
        let d = rff.features();
        let s = (1.0 / d as f64).sqrt();
        let k = self.arch.classes;
        let head = self.head_index();
        self.params[head] = Matrix::from_fn(d, k, |_, _| s * rng.normal());
        self.params[head + 1] = Matrix::zeros(1, k);
        self.rff = Some(rff);
        self.head_prior_precision = Some(head_prior_precision);
        Ok(self)
    }

    /// Rebuilds a network from stored tensors.
    pub fn from_parts(
        arch: ArchConfig,
        params: Vec<Matrix>,
        sn_state: Vec<Vec<f64>>,
        rff: Option<RffMap>,
        head_prior_precision: Option<f64>,
    ) -> Result<Self> {
        arch.validate()?;
        let reference = Self::init(arch.clone(), 0)?;
        if params.len() != reference.params.len() || sn_state.len() != reference.sn_state.len() {
            return Err(Error::invalid("tensor count does not match the architecture"));
        }
        let head = reference.head_index();
        for (i, (p, r)) in params.iter().zip(&reference.params).enumerate() {
            let ok = if i == head && rff.is_some() {
                p.cols() == r.cols() && Some(p.rows()) == rff.as_ref().map(RffMap::features)
            } else {
                p.shape() == r.shape()
            };
            if !ok {
                return Err(Error::shape("Backbone::from_parts", format!("{:?}", r.shape()), format!("{:?}", p.shape())));
            }
        }
        Ok(Backbone {
            arch,
            params,
            sn_state,
            rff,
            head_prior_precision,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn sn_state(&self) -> &[Vec<f64>] {
        &self.sn_state
    }

    pub fn rff(&self) -> Option<&RffMap> {
        self.rff.as_ref()
    }

    pub fn head_prior_precision(&self) -> Option<f64> {
        self.head_prior_precision
    }

    /// Names matching [`Backbone::params`], used by the model container.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["input.w".to_string(), "input.b".to_string()];
        for b in 0..self.arch.blocks {
            for t in ["w1", "b1", "w2", "b2"] {
                names.push(format!("block{b}.{t}"));
            }
        }
        names.push("head.w".into());
        names.push("head.b".into());
        names
    }

    fn head_index(&self) -> usize {
        2 + 4 * self.arch.blocks
    }

    fn sn_indices(arch: &ArchConfig) -> Vec<usize> {
        let mut idx = vec![0];
        for b in 0..arch.blocks {
            idx.push(2 + 4 * b);
            idx.push(4 + 4 * b);
        }
        idx
    }

    /// Head weights (`hidden×K`, or `D×K` with random features).
    pub fn head_weights(&self) -> &Matrix {
        &self.params[self.head_index()]
    }

    pub fn head_bias(&self) -> &[f64] {
        self.params[self.head_index() + 1].as_slice()
    }

    /// Width of the representation the head reads.
    pub fn feature_dim(&self) -> usize {
        self.rff.as_ref().map_or(self.arch.hidden, RffMap::features)
    }

    pub fn forward(&self, x: &Matrix, mode: Mode<'_>) -> Result<Forward> {
        let tape = self.run(x, mode)?;
        let logits = self.head_logits(&tape.features);
        Ok(Forward {
            hidden: tape.h.last().cloned().unwrap_or(tape.features),
            logits,
        })
    }

    /// The representation the head reads: hidden activations, or `φ` of them.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.run(x, Mode::Deterministic)?.features)
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        let mut logits = self.forward(x, Mode::Deterministic)?.logits;
        for r in 0..logits.rows() {
            softmax_in_place(logits.row_mut(r));
        }
        Ok(logits)
    }

    fn head_logits(&self, features: &Matrix) -> Matrix {
        let head = self.head_index();
        let mut logits = features.matmul(&self.params[head]).expect("head width");
        add_bias(&mut logits, self.params[head + 1].as_slice());
        logits
    }

    fn run(&self, x: &Matrix, mut mode: Mode<'_>) -> Result<Tape> {
        if x.cols() != self.arch.input_dim {
            return Err(Error::shape("Backbone::forward", self.arch.input_dim, x.cols()));
        }
        let p = &self.params;
        let mut a0 = x.matmul(&p[0])?;
        add_bias(&mut a0, p[1].as_slice());
        let mut h = a0.clone();
        relu(&mut h);
        let mut hs = vec![h];
        let mut z1s = Vec::with_capacity(self.arch.blocks);
        let mut masks = Vec::with_capacity(self.arch.blocks);
        let mut ds = Vec::with_capacity(self.arch.blocks);
        let rate = self.arch.dropout_rate;
        for b in 0..self.arch.blocks {
            let base = 2 + 4 * b;
            let h = hs.last().expect("nonempty");
            let mut z1 = h.matmul(&p[base])?;
            add_bias(&mut z1, p[base + 1].as_slice());
            let mut d = z1.clone();
            relu(&mut d);
            let mask = if rate > 0.0 {
                match &mut mode {
                    Mode::Deterministic => None,
                    Mode::Member(seed) => {
                        let mut rng = derive_stream(*seed, &format!("dropout-member/block{b}"));
                        let unit = unit_mask(&mut rng, self.arch.hidden, rate);
                        Some(Matrix::from_fn(x.rows(), self.arch.hidden, |_, c| unit[c]))
                    }
                    Mode::Train(rng) => {
                        let keep = 1.0 / (1.0 - rate);
                        Some(Matrix::from_fn(x.rows(), self.arch.hidden, |_, _| {
                            if rng.uniform() < rate {
                                0.0
                            } else {
                                keep
                            }
                        }))
                    }
                }
            } else {
                None
            };
            if let Some(m) = &mask {
                for (v, k) in d.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *v *= k;
                }
            }
            let mut out = d.matmul(&p[base + 2])?;
            add_bias(&mut out, p[base + 3].as_slice());
            for (o, hv) in out.as_mut_slice().iter_mut().zip(h.as_slice()) {
                *o += hv;
            }
            z1s.push(z1);
            masks.push(mask);
            ds.push(d);
            hs.push(out);
        }
        let last = hs.last().expect("nonempty");
        let (rff_z, features) = match &self.rff {
            Some(map) => {
                let z = map.pre_activations(last)?;
                let features = map.apply_batch(last)?;
                (Some(z), features)
            }
            None => (None, last.clone()),
        };
        Ok(Tape {
            a0,
            h: hs,
            z1: z1s,
            masks,
            d: ds,
            rff_z,
            features,
        })
    }

    /// Mean cross-entropy plus the weight penalty, and its gradient with
    /// respect to every tensor. `n_total` scales the head prior penalty.
    pub fn loss_and_grad(
        &self,
        x: &Matrix,
        y: &[usize],
        weight_decay: f64,
        n_total: usize,
        mode: Mode<'_>,
    ) -> Result<(f64, Vec<Matrix>)> {
        let tape = self.run(x, mode)?;
        let mut logits = self.head_logits(&tape.features);
        let n = x.rows() as f64;
        let mut ce = 0.0;
        for (r, &label) in y.iter().enumerate() {
            let row = logits.row_mut(r);
            softmax_in_place(row);
            ce -= row[label].max(1e-300).ln();
            row[label] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n);
        }
        let dlogits = logits;
        let mut grads: Vec<Matrix> = self.params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        let head = self.head_index();
        grads[head] = tape.features.t_matmul(&dlogits)?;
        grads[head + 1] = column_sums(&dlogits);
        let dfeat = dlogits.matmul_t(&self.params[head])?;
        let mut dh = match (&self.rff, &tape.rff_z) {
            (Some(map), Some(z)) => map.backward(z, &dfeat),
            _ => dfeat,
        };
        for b in (0..self.arch.blocks).rev() {
            let base = 2 + 4 * b;
            // out = h + d W2 + b2
            grads[base + 2] = tape.d[b].t_matmul(&dh)?;
            grads[base + 3] = column_sums(&dh);
            let mut dd = dh.matmul_t(&self.params[base + 2])?;
            if let Some(m) = &tape.masks[b] {
                for (g, k) in dd.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *g *= k;
                }
            }
            for (g, z) in dd.as_mut_slice().iter_mut().zip(tape.z1[b].as_slice()) {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
            grads[base] = tape.h[b].t_matmul(&dd)?;
            grads[base + 1] = column_sums(&dd);
            let back = dd.matmul_t(&self.params[base])?;
            for (g, v) in dh.as_mut_slice().iter_mut().zip(back.as_slice()) {
                *g += v;
            }
        }
        for (g, a) in dh.as_mut_slice().iter_mut().zip(tape.a0.as_slice()) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        grads[0] = x.t_matmul(&dh)?;
        grads[1] = column_sums(&dh);

        let mut penalty = 0.0;
        for (i, (p, g)) in self.params.iter().zip(grads.iter_mut()).enumerate() {
            let coef = self.penalty_coef(i, weight_decay, n_total);
            if coef == 0.0 {
                continue;
            }
            penalty += 0.5 * coef * p.as_slice().iter().map(|v| v * v).sum::<f64>();
            for (gv, pv) in g.as_mut_slice().iter_mut().zip(p.as_slice()) {
                *gv += coef * pv;
            }
        }
        Ok((ce / n + penalty, grads))
    }

    fn penalty_coef(&self, tensor: usize, weight_decay: f64, n_total: usize) -> f64 {
        let head = self.head_index();
        match self.head_prior_precision {
            Some(lambda) if tensor == head => lambda / n_total.max(1) as f64,
            Some(_) if tensor == head + 1 => 0.0,
            _ => weight_decay,
        }
    }

    /// Mean loss (with penalty) on a whole dataset, without dropout.
    pub fn loss(&self, x: &Matrix, y: &[usize], weight_decay: f64, n_total: usize) -> Result<f64> {
        Ok(self.loss_and_grad(x, y, weight_decay, n_total, Mode::Deterministic)?.0)
    }

    /// Minibatch SGD with (Nesterov) momentum and optional cosine annealing.
    ///
    /// Returns the mean training loss of every epoch. Errors if the loss
    /// becomes non-finite.
    pub fn train(&mut self, data: &Dataset, cfg: &OptimizerConfig, seed: u64) -> Result<Vec<f64>> {
        cfg.validate()?;
        if data.k > self.arch.classes {
            return Err(Error::invalid("dataset has more classes than the head"));
        }
        let n = data.len();
        let mut rng = derive_stream(seed, "backbone-train");
        let mut velocity: Vec<Matrix> = self.params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let mut trace = Vec::with_capacity(cfg.epochs);
        let head_bias = self.head_index() + 1;
        for epoch in 0..cfg.epochs {
            let lr = cfg.lr_at(epoch);
            rng.shuffle(&mut order);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let xb = data.x.select_rows(batch);
                let yb: Vec<usize> = batch.iter().map(|&i| data.y[i]).collect();
                let (loss, grads) = self.loss_and_grad(&xb, &yb, cfg.weight_decay, n, Mode::Train(&mut rng))?;
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                epoch_loss += loss * batch.len() as f64;
                let skip = |i: usize| self.rff.is_some() && i == head_bias;
                let norm = grads
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !skip(*i))
                    .map(|(_, g)| g.as_slice().iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                let scale = match cfg.grad_clip {
                    Some(c) if norm > c => c / norm,
                    _ => 1.0,
                };
                for (i, ((p, v), g)) in self.params.iter_mut().zip(velocity.iter_mut()).zip(&grads).enumerate() {
                    if self.rff.is_some() && i == head_bias {
                        continue;
                    }
                    for ((pv, vv), gv) in p.as_mut_slice().iter_mut().zip(v.as_mut_slice()).zip(g.as_slice()) {
                        let gv = scale * gv;
                        *vv = cfg.momentum * *vv + gv;
                        let step = if cfg.nesterov { gv + cfg.momentum * *vv } else { *vv };
                        *pv -= lr * step;
                    }
                }
                self.project_spectral(1);
            }
            let mean = epoch_loss / n as f64;
            if !mean.is_finite() || self.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
            trace.push(mean);
        }
        Ok(trace)
    }

    /// Applies `iterations` power-iteration steps and the norm bound to every
    /// hidden weight. No-op when spectral normalization is disabled.
    pub fn project_spectral(&mut self, iterations: usize) {
        let Some(bound) = self.arch.sn_bound else { return };
        for (slot, idx) in Self::sn_indices(&self.arch).into_iter().enumerate() {
            let u = std::mem::take(&mut self.sn_state[slot]);
            let out = spectral_normalize(&self.params[idx], &u, bound, iterations);
            self.params[idx] = out.weight;
            self.sn_state[slot] = out.u;
        }
    }

    /// Power-iteration estimates of the top singular value of each hidden weight.
    pub fn hidden_spectral_norms(&self, iterations: usize) -> Vec<f64> {
        Self::sn_indices(&self.arch)
            .into_iter()
            .map(|i| top_singular_value(&self.params[i], iterations))
            .collect()
    }

    /// Class probabilities of `m` dropout members on `x`, as `[M][N×K]`.
    ///
    /// Member `j` uses the unit masks derived from `(seed, j)`, so repeated
    /// calls with the same seed evaluate the same hypotheses.
    pub fn dropout_member_probs(&self, x: &Matrix, m: usize, seed: u64, exec: Exec) -> Result<Vec<Matrix>> {
        if self.arch.dropout_rate <= 0.0 {
            return Err(Error::DropoutDisabled);
        }
        if x.cols() != self.arch.input_dim {
            return Err(Error::shape("dropout_member_probs", self.arch.input_dim, x.cols()));
        }
        let out = exec.map(m, |j| {
            let mut logits = self.forward(x, Mode::Member(member_seed(seed, j)))?.logits;
            for r in 0..logits.rows() {
                softmax_in_place(logits.row_mut(r));
            }
            Ok(logits)
        });
        out.into_iter().collect()
    }
}

/// Seed of dropout member `j` under master `seed`.
pub fn member_seed(seed: u64, j: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(j as u64)
}

fn unit_mask(rng: &mut RngStream, width: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..width).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect()
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn relu(m: &mut Matrix) {
    m.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct SpectralNormOutput {
    pub weight: Matrix,
    pub u: Vec<f64>,
    pub sigma: f64,
}

/// Power iteration on `W` (`u` lives in the column space of `Wᵀ`) followed by
/// rescaling to `bound` when the estimate exceeds it.
pub fn spectral_normalize(w: &Matrix, u: &[f64], bound: f64, iterations: usize) -> SpectralNormOutput {
    let mut u = u.to_vec();
    let mut sigma = 0.0;
    for _ in 0..iterations.max(1) {
        let v = w.matvec(&u).expect("u matches columns");
        let vn = norm2(&v);
        if vn == 0.0 {
            return SpectralNormOutput {
                weight: w.clone(),
                u,
                sigma: 0.0,
            };
        }
        let v: Vec<f64> = v.iter().map(|x| x / vn).collect();
        let next = w.t_matvec(&v).expect("v matches rows");
        let un = norm2(&next);
        if un == 0.0 {
            break;
        }
        sigma = un;
        u = next.iter().map(|x| x / un).collect();
    }
    let weight = if sigma > bound { w.scaled(bound / sigma) } else { w.clone() };
    SpectralNormOutput { weight, u, sigma }
}

pub fn top_singular_value(w: &Matrix, iterations: usize) -> f64 {
    let mut rng = derive_stream(0, "top-singular-value");
    let mut u: Vec<f64> = (0..w.cols()).map(|_| rng.normal()).collect();
    let n = norm2(&u);
    u.iter_mut().for_each(|v| *v /= n);
    spectral_normalize(w, &u, f64::INFINITY, iterations).sigma
}
