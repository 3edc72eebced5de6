//! Active-learning query strategies and the acquisition loop.
//!
//! Utilities score candidates from a committee of member predictions:
//! least-confidence (US), vote entropy (QBC) and mutual information (BALD).
//! Batches are chosen by top-b, by sequential selection with a Laplace update
//! after every pick, or greedily by BatchBALD.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::laplace::{mean_field_probs, LaplacePosterior, Mode};
use crate::mc::sampled_probs;
use crate::metrics::{accuracy, entropy_score};
use crate::model::{sub_seed, Model, ModelConfig, ModelKind};
use crate::numerics::{argmax, derive_stream, dot, sigmoid, softmax_in_place, Matrix, RngStream};

const LOG_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Rand,
    Us,
    Qbc,
    Bald,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Rand => "rand",
            Strategy::Us => "us",
            Strategy::Qbc => "qbc",
            Strategy::Bald => "bald",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    TopB,
    Update,
    BatchBald,
}

impl SelectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMode::TopB => "topb",
            SelectionMode::Update => "update",
            SelectionMode::BatchBald => "batchbald",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlConfig {
    pub initial_labeled: usize,
    pub candidate_pool: usize,
    pub batch_size: usize,
    pub cycles: usize,
    pub strategy: Strategy,
    pub mode: SelectionMode,
    pub seeds: Vec<u64>,
    /// Posterior samples per rescoring step for QBC and BALD.
    pub committee: usize,
    /// Weight samples forming the BatchBALD committee.
    pub batchbald_members: usize,
    /// Sampled label configurations once exact enumeration is too large.
    pub config_samples: usize,
    /// Largest number of joint label configurations enumerated exactly.
    pub exact_limit: usize,
}

impl Default for AlConfig {
    fn default() -> Self {
        AlConfig {
            initial_labeled: 16,
            candidate_pool: 1000,
            batch_size: 32,
            cycles: 15,
            strategy: Strategy::Us,
            mode: SelectionMode::TopB,
            seeds: (0..10).collect(),
            committee: 256,
            batchbald_members: 32,
            config_samples: 10_000,
            exact_limit: 10_000,
        }
    }
}

impl AlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.initial_labeled == 0 || self.batch_size == 0 || self.cycles == 0 {
            return bad("initial_labeled, batch_size and cycles must be >= 1");
        }
        if self.candidate_pool < self.batch_size {
            return bad("candidate_pool must hold at least one batch");
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.committee < 2 || self.batchbald_members < 2 || self.config_samples == 0 {
            return bad("committee sizes must be >= 2 and config_samples >= 1");
        }
        match (self.strategy, self.mode) {
            (Strategy::Rand, _) => {}
            (Strategy::Bald, SelectionMode::BatchBald) => {}
            (_, SelectionMode::BatchBald) => return bad("batchbald mode requires the bald strategy"),
            _ => {}
        }
        Ok(())
    }

    /// Labels held after `cycle` acquisition rounds.
    pub fn n_labeled(&self, cycle: usize) -> usize {
        self.initial_labeled + self.batch_size * cycle
    }
}

/// One point of a learning curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurveRecord {
    pub dataset: String,
    pub strategy: Strategy,
    pub mode: SelectionMode,
    pub seed: u64,
    pub cycle: usize,
    pub n_labeled: usize,
    pub acc: f64,
}

/// Least confidence `1 − max_y p(y)`.
pub fn score_us(probs: &[f64]) -> f64 {
    1.0 - probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Weighted vote entropy over the members' predicted classes.
pub fn score_qbc(members: &Matrix, weights: &[f64]) -> f64 {
    let mut votes = vec![0.0; members.cols()];
    for (m, w) in weights.iter().enumerate() {
        votes[argmax(members.row(m))] += w;
    }
    entropy_score(&votes)
}

/// Mutual information `H[Σ wₘ pₘ] − Σ wₘ H[pₘ]`.
pub fn score_bald(members: &Matrix, weights: &[f64]) -> f64 {
    let mut mean = vec![0.0; members.cols()];
    let mut expected = 0.0;
    for (m, &w) in weights.iter().enumerate() {
        let row = members.row(m);
        for (acc, p) in mean.iter_mut().zip(row) {
            *acc += w * p;
        }
        expected += w * entropy_score(row);
    }
    entropy_score(&mean) - expected
}

/// Indices of the `b` largest scores, highest first, ties to the lowest index.
pub fn select_topb(scores: &[f64], b: usize) -> Result<Vec<usize>> {
    if b > scores.len() {
        return Err(Error::InsufficientPool {
            need: b,
            have: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order.truncate(b);
    Ok(order)
}

/// Index of the largest score among `available`, ties to the lowest index.
fn best_available(scores: &[f64], available: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if available[i] && best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Class probabilities of `S` logit draws `m + √v·εₛ`. The draws `ε` are
/// shared by all candidates, so scores of different candidates use common
/// random numbers.
fn committee_from_moments(mean: &[f64], v: f64, mode: Mode, classes: usize, eps: &Matrix) -> Matrix {
    let sd = v.max(0.0).sqrt();
    let mut out = Matrix::zeros(eps.rows(), classes);
    for s in 0..eps.rows() {
        let e = eps.row(s);
        let row = out.row_mut(s);
        match mode {
            Mode::Binary => {
                let p = sigmoid(mean[0] + sd * e[0]);
                row[0] = 1.0 - p;
                row[1] = p;
            }
            Mode::Multiclass => {
                for ((o, m), z) in row.iter_mut().zip(mean).zip(e) {
                    *o = m + sd * z;
                }
                softmax_in_place(row);
            }
        }
    }
    out
}

fn committee_noise(posterior: &LaplacePosterior, size: usize, seed: u64) -> Matrix {
    let width = posterior.mode.width(posterior.classes);
    let mut eps = Matrix::zeros(size, width);
    derive_stream(seed, "committee").fill_normal(eps.as_mut_slice());
    eps
}

/// Utility of every candidate under a Laplace posterior given its logit moments.
fn scores_from_moments(
    strategy: Strategy,
    posterior: &LaplacePosterior,
    means: &Matrix,
    var: &[f64],
    eps: &Matrix,
    available: Option<&[bool]>,
    exec: Exec,
) -> Result<Vec<f64>> {
    let (mode, k) = (posterior.mode, posterior.classes);
    let uniform = vec![1.0 / eps.rows() as f64; eps.rows()];
    let scores = exec.map(means.rows(), |i| {
        if available.is_some_and(|a| !a[i]) {
            return f64::NEG_INFINITY;
        }
        match strategy {
            Strategy::Us => {
                let row = Matrix::from_vec(1, means.cols(), means.row(i).to_vec()).expect("row");
                score_us(mean_field_probs(&row, &var[i..=i], mode, k).row(0))
            }
            Strategy::Qbc => score_qbc(&committee_from_moments(means.row(i), var[i], mode, k, eps), &uniform),
            Strategy::Bald => score_bald(&committee_from_moments(means.row(i), var[i], mode, k, eps), &uniform),
            Strategy::Rand => 0.0,
        }
    });
    if strategy == Strategy::Rand {
        return Err(Error::invalid("random selection has no utility scores"));
    }
    Ok(scores)
}

/// Sequential selection with a one-step Laplace update after each pick.
///
/// Before every pick all remaining candidates are rescored under the current
/// posterior. The last pick is not followed by an update, so `b` picks cost
/// `b − 1` updates. Logit variances are downdated in place: a one-sample
/// update changes `Σ̂` by `−c·uuᵀ` with `u = Σ̂φ`, so `vᵢ` drops by `c(φᵢᵀu)²`.
#[allow(clippy::too_many_arguments)]
pub fn select_sequential_update(
    posterior: &LaplacePosterior,
    features: &Matrix,
    labels: &[usize],
    b: usize,
    strategy: Strategy,
    committee: usize,
    seed: u64,
    exec: Exec,
) -> Result<(Vec<usize>, LaplacePosterior)> {
    if strategy == Strategy::Rand {
        return Err(Error::invalid("sequential selection needs a utility strategy"));
    }
    if labels.len() != features.rows() {
        return Err(Error::shape("select_sequential_update", features.rows(), labels.len()));
    }
    let n = features.rows();
    if b > n {
        return Err(Error::InsufficientPool { need: b, have: n });
    }
    let eps = committee_noise(posterior, committee.max(2), seed);
    let (mut means, mut var) = posterior.logit_moments(features)?;
    let mut post = posterior.clone();
    let mut available = vec![true; n];
    let mut chosen = Vec::with_capacity(b);
    for step in 0..b {
        let scores = scores_from_moments(strategy, &post, &means, &var, &eps, Some(&available), exec)?;
        let pick = best_available(&scores, &available).ok_or(Error::InsufficientPool { need: b, have: step })?;
        available[pick] = false;
        chosen.push(pick);
        if step + 1 == b {
            break;
        }
        let phi = features.row(pick);
        let u = post.cov.matvec(phi)?;
        let q = dot(&u, phi);
        let phi_row = Matrix::from_vec(1, phi.len(), phi.to_vec())?;
        let next = post.update(&phi_row, &labels[pick..=pick], 1)?;
        if q > 0.0 {
            let c = (q - next.cov.quad_form(phi)) / (q * q);
            let proj = features.matvec(&u)?;
            for (v, p) in var.iter_mut().zip(&proj) {
                *v = (*v - c * p * p).max(0.0);
            }
        }
        means = features.matmul(&next.mean)?;
        post = next;
    }
    Ok((chosen, post))
}

/// Greedy BatchBALD over `members` (each `N×K`) with normalized `weights`.
pub fn select_batchbald(
    members: &[Matrix],
    weights: &[f64],
    b: usize,
    config_samples: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    Ok(batchbald_greedy(members, weights, b, config_samples, 10_000, seed)?.0)
}

/// Greedy BatchBALD returning the picks and the joint mutual information of
/// each prefix. The joint entropy of `j` labels is enumerated exactly while
/// `Kʲ ≤ exact_limit` and estimated from `config_samples` sampled label
/// configurations beyond that.
pub fn batchbald_greedy(
    members: &[Matrix],
    weights: &[f64],
    b: usize,
    config_samples: usize,
    exact_limit: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let m_count = members.len();
    if m_count < 2 || weights.len() != m_count {
        return Err(Error::invalid("BatchBALD needs at least two weighted members"));
    }
    let (n, k) = members[0].shape();
    if members.iter().any(|p| p.shape() != (n, k)) {
        return Err(Error::shape("select_batchbald", format!("{n}x{k}"), "ragged members"));
    }
    if b > n {
        return Err(Error::InsufficientPool { need: b, have: n });
    }
    let total: f64 = weights.iter().sum();
    let w: Vec<f64> = weights.iter().map(|x| x / total).collect();
    let mut stacked = Vec::with_capacity(m_count * n * k);
    for p in members {
        stacked.extend_from_slice(p.as_slice());
    }
    let probs = Matrix::from_vec(m_count, n * k, stacked)?;
    let cond: Vec<f64> = (0..n)
        .map(|i| (0..m_count).map(|m| w[m] * entropy_score(&probs.row(m)[i * k..(i + 1) * k])).sum())
        .collect();

    let mut state = JointState::empty(m_count);
    let mut rng = derive_stream(seed, "batchbald");
    let mut available = vec![true; n];
    let mut chosen = Vec::with_capacity(b);
    let mut values = Vec::with_capacity(b);
    let mut cond_sum = 0.0;
    for _ in 0..b {
        let joint = state.joint_entropies(&w, &probs, n, k)?;
        let scores: Vec<f64> = (0..n).map(|i| joint[i] - cond_sum - cond[i]).collect();
        let pick = best_available(&scores, &available).expect("b <= n");
        available[pick] = false;
        chosen.push(pick);
        values.push(scores[pick]);
        cond_sum += cond[pick];
        let column = |m: usize| &probs.row(m)[pick * k..(pick + 1) * k];
        if !state.sampled && state.log_p.rows() * k * k <= exact_limit {
            state.expand_exact(k, column);
        } else {
            if !state.sampled {
                state = JointState::sample(&w, config_samples, &chosen[..chosen.len() - 1], &probs, k, &mut rng);
            }
            state.extend_sampled(k, column, &mut rng);
        }
    }
    Ok((chosen, values))
}

/// Label configurations of the chosen set, with `ln Πᵢ pₘ(yᵢ)` per member.
struct JointState {
    log_p: Matrix,
    /// Member that generated each sampled configuration.
    origin: Vec<usize>,
    sampled: bool,
}

impl JointState {
    fn empty(members: usize) -> Self {
        JointState {
            log_p: Matrix::zeros(1, members),
            origin: Vec::new(),
            sampled: false,
        }
    }

    fn sample(w: &[f64], samples: usize, chosen: &[usize], probs: &Matrix, k: usize, rng: &mut RngStream) -> Self {
        let mut state = JointState {
            log_p: Matrix::zeros(samples, w.len()),
            origin: (0..samples).map(|_| draw(w, rng)).collect(),
            sampled: true,
        };
        for &i in chosen {
            state.extend_sampled(k, |m| &probs.row(m)[i * k..(i + 1) * k], rng);
        }
        state
    }

    fn expand_exact<'a>(&mut self, k: usize, column: impl Fn(usize) -> &'a [f64]) {
        let (rows, members) = self.log_p.shape();
        let mut next = Matrix::zeros(rows * k, members);
        for r in 0..rows {
            for y in 0..k {
                let out = next.row_mut(r * k + y);
                for (m, o) in out.iter_mut().enumerate() {
                    *o = self.log_p.get(r, m) + column(m)[y].max(LOG_FLOOR).ln();
                }
            }
        }
        self.log_p = next;
    }

    fn extend_sampled<'a>(&mut self, k: usize, column: impl Fn(usize) -> &'a [f64], rng: &mut RngStream) {
        for s in 0..self.log_p.rows() {
            let y = draw(&column(self.origin[s])[..k], rng);
            for m in 0..self.log_p.cols() {
                let v = self.log_p.get(s, m) + column(m)[y].max(LOG_FLOOR).ln();
                self.log_p.set(s, m, v);
            }
        }
    }

    /// Joint entropy of the chosen labels together with each candidate's label.
    fn joint_entropies(&self, w: &[f64], probs: &Matrix, n: usize, k: usize) -> Result<Vec<f64>> {
        let (rows, members) = self.log_p.shape();
        let mut scaled = Matrix::zeros(rows, members);
        let mut shift = vec![0.0; rows];
        let mut coef = vec![0.0; rows];
        for r in 0..rows {
            let lp = self.log_p.row(r);
            shift[r] = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = scaled.row_mut(r);
            for m in 0..members {
                out[m] = w[m] * (lp[m] - shift[r]).exp();
            }
            coef[r] = if self.sampled {
                1.0 / (rows as f64 * out.iter().sum::<f64>())
            } else {
                shift[r].exp()
            };
        }
        let q = scaled.matmul(probs)?;
        let mut h = vec![0.0; n];
        for r in 0..rows {
            let row = q.row(r);
            for (i, hi) in h.iter_mut().enumerate() {
                let mut acc = 0.0;
                for &v in &row[i * k..(i + 1) * k] {
                    if v > 0.0 {
                        acc += v * (v.ln() + shift[r]);
                    }
                }
                *hi -= coef[r] * acc;
            }
        }
        Ok(h)
    }
}

/// Index drawn from the categorical distribution `p`.
fn draw(p: &[f64], rng: &mut RngStream) -> usize {
    let total: f64 = p.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, v) in p.iter().enumerate() {
        u -= v;
        if u < 0.0 {
            return i;
        }
    }
    p.len() - 1
}

/// Candidate utilities under a trained model in top-b mode.
fn topb_scores(model: &Model, x: &Matrix, cfg: &AlConfig, seed: u64, exec: Exec) -> Result<Vec<f64>> {
    match model {
        Model::SngpLa {
            extractor, posterior, ..
        } => {
            let phi = extractor.features(x)?;
            let (means, var) = posterior.logit_moments(&phi)?;
            let eps = committee_noise(posterior, cfg.committee, seed);
            scores_from_moments(cfg.strategy, posterior, &means, &var, &eps, None, exec)
        }
        Model::Mc { ensemble, .. } | Model::SngpMc { ensemble, .. } => {
            let input = match model {
                Model::SngpMc { extractor, .. } => extractor.features(x)?,
                _ => x.clone(),
            };
            let members = ensemble.source.member_probs(&input, exec)?;
            let w = normalized(&ensemble.log_weights);
            let k = members[0].cols();
            Ok(exec.map(x.rows(), |i| {
                let rows = Matrix::from_fn(members.len(), k, |m, c| members[m].get(i, c));
                match cfg.strategy {
                    Strategy::Us => {
                        let mean: Vec<f64> = (0..k).map(|c| dot(&rows.col(c), &w)).collect();
                        score_us(&mean)
                    }
                    Strategy::Qbc => score_qbc(&rows, &w),
                    _ => score_bald(&rows, &w),
                }
            }))
        }
    }
}

fn normalized(log_weights: &[f64]) -> Vec<f64> {
    let top = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Chooses `cfg.batch_size` candidates (indices into `candidates`).
fn acquire(model: &Model, candidates: &Dataset, cfg: &AlConfig, seed: u64, exec: Exec) -> Result<Vec<usize>> {
    let b = cfg.batch_size;
    if cfg.strategy == Strategy::Rand {
        return Ok(derive_stream(seed, "al/random").sample_indices(candidates.len(), b));
    }
    match cfg.mode {
        SelectionMode::TopB => select_topb(&topb_scores(model, &candidates.x, cfg, seed, exec)?, b),
        SelectionMode::Update => {
            let Model::SngpLa {
                extractor, posterior, ..
            } = model
            else {
                return Err(Error::Config("update selection requires the sngp_la model".into()));
            };
            let phi = extractor.features(&candidates.x)?;
            let (idx, _) = select_sequential_update(
                posterior,
                &phi,
                &candidates.y,
                b,
                cfg.strategy,
                cfg.committee,
                seed,
                exec,
            )?;
            Ok(idx)
        }
        SelectionMode::BatchBald => {
            let (members, w) = match model {
                Model::SngpLa {
                    extractor, posterior, ..
                } => {
                    let phi = extractor.features(&candidates.x)?;
                    let weights = posterior.sample_members(cfg.batchbald_members, sub_seed(seed, "batchbald-members"))?;
                    let members = exec
                        .map(weights.len(), |j| {
                            sampled_probs(&phi, &weights[j], posterior.mode, posterior.classes)
                        })
                        .into_iter()
                        .collect::<Result<Vec<_>>>()?;
                    (members, vec![1.0; weights.len()])
                }
                Model::Mc { ensemble, .. } => (
                    ensemble.source.member_probs(&candidates.x, exec)?,
                    normalized(&ensemble.log_weights),
                ),
                Model::SngpMc { extractor, ensemble } => (
                    ensemble.source.member_probs(&extractor.features(&candidates.x)?, exec)?,
                    normalized(&ensemble.log_weights),
                ),
            };
            Ok(batchbald_greedy(&members, &w, b, cfg.config_samples, cfg.exact_limit, seed)?.0)
        }
    }
}

/// Learning curve of one seed: retrain on all labels, record test accuracy,
/// acquire a batch from a fresh candidate pool, repeat.
pub fn run_al_seed(
    cfg: &AlConfig,
    model_cfg: &ModelConfig,
    pool: &Dataset,
    test: &Dataset,
    seed: u64,
    exec: Exec,
) -> Result<Vec<LearningCurveRecord>> {
    let needed = cfg.n_labeled(cfg.cycles - 1);
    if pool.len() < needed {
        return Err(Error::InsufficientPool {
            need: needed,
            have: pool.len(),
        });
    }
    let mut rng = derive_stream(seed, "al/pool");
    let mut labeled = rng.sample_indices(pool.len(), cfg.initial_labeled);
    let mut records = Vec::with_capacity(cfg.cycles);
    for cycle in 0..cfg.cycles {
        let cycle_seed = sub_seed(seed, &format!("al/cycle-{cycle}"));
        let model = Model::train(model_cfg, &pool.subset(&labeled), cycle_seed, exec)?;
        let probs = model.predict(&test.x, exec)?;
        records.push(LearningCurveRecord {
            dataset: pool.name.clone(),
            strategy: cfg.strategy,
            mode: cfg.mode,
            seed,
            cycle,
            n_labeled: labeled.len(),
            acc: accuracy(&probs, &test.y)?,
        });
        if cycle + 1 == cfg.cycles {
            break;
        }
        let mut is_labeled = vec![false; pool.len()];
        labeled.iter().for_each(|&i| is_labeled[i] = true);
        let unlabeled: Vec<usize> = (0..pool.len()).filter(|&i| !is_labeled[i]).collect();
        if unlabeled.len() < cfg.batch_size {
            return Err(Error::InsufficientPool {
                need: cfg.batch_size,
                have: unlabeled.len(),
            });
        }
        let draw = rng.sample_indices(unlabeled.len(), cfg.candidate_pool.min(unlabeled.len()));
        let candidates: Vec<usize> = draw.iter().map(|&j| unlabeled[j]).collect();
        let picks = acquire(&model, &pool.subset(&candidates), cfg, cycle_seed, exec)?;
        labeled.extend(picks.iter().map(|&j| candidates[j]));
    }
    Ok(records)
}

/// Learning curves for every configured seed, ordered by (seed, cycle).
pub fn run_al(
    cfg: &AlConfig,
    model_cfg: &ModelConfig,
    pool: &Dataset,
    test: &Dataset,
    exec: Exec,
) -> Result<Vec<LearningCurveRecord>> {
    cfg.validate()?;
    model_cfg.validate()?;
    if cfg.mode == SelectionMode::Update && cfg.strategy != Strategy::Rand && model_cfg.kind != ModelKind::SngpLa {
        return Err(Error::Config("update selection requires the sngp_la model".into()));
    }
    let runs = exec.map(cfg.seeds.len(), |s| run_al_seed(cfg, model_cfg, pool, test, cfg.seeds[s], exec));
    let mut out = Vec::new();
    for run in runs {
        out.extend(run?);
    }
    Ok(out)
}

/// Mean accuracy over the cycles of one learning curve.
pub fn curve_area(records: &[LearningCurveRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().map(|r| r.acc).sum::<f64>() / records.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_two_moons, Standardizer};
    use crate::model::BackboneKind;
    use proptest::prelude::*;
    use super::Strategy;

    fn random_committee(rng: &mut RngStream, m: usize, k: usize) -> (Matrix, Vec<f64>) {
        let mut p = Matrix::zeros(m, k);
        for r in 0..m {
            let row: Vec<f64> = (0..k).map(|_| 3.0 * rng.normal()).collect();
            p.row_mut(r).copy_from_slice(&crate::numerics::softmax(&row).unwrap());
        }
        let w: Vec<f64> = (0..m).map(|_| rng.uniform() + 0.05).collect();
        let t: f64 = w.iter().sum();
        (p, w.into_iter().map(|v| v / t).collect())
    }

    #[test]
    fn us_examples() {
        assert_eq!(score_us(&[0.0, 1.0, 0.0]), 0.0);
        assert!((score_us(&[0.25; 4]) - 0.75).abs() < 1e-15);
        assert!((score_us(&[0.6, 0.4]) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn qbc_examples() {
        let agree = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.9, 0.1]]).unwrap();
        assert_eq!(score_qbc(&agree, &[0.5, 0.5]), 0.0);
        let split = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8]]).unwrap();
        assert!((score_qbc(&split, &[0.5, 0.5]) - 2f64.ln()).abs() < 1e-15);
        // Ties in a member's prediction go to the lowest class.
        let tie = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(score_qbc(&tie, &[0.5, 0.5]), 0.0);
    }

    #[test]
    fn qbc_weighted_matches_definition() {
        let mut rng = derive_stream(4, "qbc");
        for _ in 0..100 {
            let (p, w) = random_committee(&mut rng, 7, 4);
            let mut votes = [0.0f64; 4];
            for m in 0..7 {
                let row = p.row(m);
                let mut best = 0;
                for c in 1..4 {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                votes[best] += w[m];
            }
            let oracle: f64 = -votes.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
            assert!((score_qbc(&p, &w) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn bald_examples() {
        let same = Matrix::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
        assert!(score_bald(&same, &[0.5, 0.5]).abs() < 1e-15);
        let opposite = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((score_bald(&opposite, &[0.5, 0.5]) - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn bald_bounds_on_random_committees() {
        let mut rng = derive_stream(5, "bald");
        for _ in 0..1000 {
            let m = 1 + rng.below(10);
            let k = 2 + rng.below(5);
            let (p, w) = random_committee(&mut rng, m, k);
            let s = score_bald(&p, &w);
            let mean: Vec<f64> = (0..p.cols()).map(|c| dot(&p.col(c), &w)).collect();
            assert!(s >= -1e-12 && s <= entropy_score(&mean) + 1e-9);
        }
    }

    #[test]
    fn topb_examples() {
        let mut picks = select_topb(&[3.0, 1.0, 2.0], 2).unwrap();
        picks.sort();
        assert_eq!(picks, vec![0, 2]);
        assert_eq!(select_topb(&[1.0; 5], 2).unwrap(), vec![0, 1]);
        assert_eq!(select_topb(&[1.0, 2.0, 0.5], 3).unwrap().len(), 3);
        assert!(matches!(select_topb(&[1.0], 2), Err(Error::InsufficientPool { .. })));
    }

    proptest! {
        #[test]
        fn topb_invariant_under_monotone_transform(scores in prop::collection::vec(-5.0f64..5.0, 1..40), b in 1usize..10) {
            let b = b.min(scores.len());
            let transformed: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect();
            prop_assert_eq!(select_topb(&scores, b).unwrap(), select_topb(&transformed, b).unwrap());
        }

        #[test]
        fn bald_is_bounded(seed in 0u64..10_000) {
            let mut rng = derive_stream(seed, "bald-prop");
            let (m, k) = (1 + rng.below(8), 2 + rng.below(6));
            let (p, w) = random_committee(&mut rng, m, k);
            let s = score_bald(&p, &w);
            let mean: Vec<f64> = (0..p.cols()).map(|c| dot(&p.col(c), &w)).collect();
            prop_assert!(s >= -1e-9 && s <= entropy_score(&mean) + 1e-9);
        }

        #[test]
        fn batchbald_starts_with_bald_argmax(seed in 0u64..10_000) {
            let mut rng = derive_stream(seed, "bb-prop");
            let (m, n, k) = (2 + rng.below(5), 1 + rng.below(8), 2 + rng.below(3));
            let members = random_members(&mut rng, m, n, k);
            let w = vec![1.0 / m as f64; m];
            let bald: Vec<f64> = (0..n).map(|i| score_bald(&candidate(&members, i), &w)).collect();
            let first = batchbald_greedy(&members, &w, 1, 100, 10_000, seed).unwrap().0[0];
            prop_assert!((bald[first] - bald[select_topb(&bald, 1).unwrap()[0]]).abs() < 1e-12);
        }
    }

    fn random_members(rng: &mut RngStream, m: usize, n: usize, k: usize) -> Vec<Matrix> {
        (0..m)
            .map(|_| {
                let mut p = Matrix::zeros(n, k);
                for r in 0..n {
                    let z: Vec<f64> = (0..k).map(|_| 2.0 * rng.normal()).collect();
                    p.row_mut(r).copy_from_slice(&crate::numerics::softmax(&z).unwrap());
                }
                p
            })
            .collect()
    }

    fn candidate(members: &[Matrix], i: usize) -> Matrix {
        Matrix::from_fn(members.len(), members[0].cols(), |m, c| members[m].get(i, c))
    }

    /// Joint mutual information of `set` by direct enumeration of all label tuples.
    fn joint_mi_oracle(members: &[Matrix], w: &[f64], set: &[usize]) -> f64 {
        let k = members[0].cols();
        let configs = k.pow(set.len() as u32);
        let mut joint = 0.0;
        for c in 0..configs {
            let mut labels = Vec::new();
            let mut rest = c;
            for _ in set {
                labels.push(rest % k);
                rest /= k;
            }
            let p: f64 = (0..members.len())
                .map(|m| w[m] * set.iter().zip(&labels).map(|(&i, &y)| members[m].get(i, y)).product::<f64>())
                .sum();
            if p > 0.0 {
                joint -= p * p.ln();
            }
        }
        let cond: f64 = set
            .iter()
            .map(|&i| (0..members.len()).map(|m| w[m] * entropy_score(members[m].row(i))).sum::<f64>())
            .sum();
        joint - cond
    }

    #[test]
    fn batchbald_skips_exact_duplicates() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.9, 0.1]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0], vec![0.2, 0.8]]).unwrap();
        let (picks, values) = batchbald_greedy(&[a.clone(), b.clone()], &[0.5, 0.5], 2, 100, 10_000, 0).unwrap();
        assert_eq!(picks, vec![0, 2]);
        // Joint of (y0, y2): ½(1,0)⊗(.9,.1) + ½(0,1)⊗(.2,.8) = (.45, .05, .1, .4).
        let h = |p: &[f64]| -p.iter().map(|v| v * f64::ln(*v)).sum::<f64>();
        let joint = h(&[0.45, 0.05, 0.1, 0.4]);
        let cond = 0.5 * h(&[0.9, 0.1]) + 0.5 * h(&[0.2, 0.8]);
        assert!((values[0] - 2f64.ln()).abs() < 1e-12);
        assert!((values[1] - (joint - cond)).abs() < 1e-12);
        // The duplicate of the first pick would add nothing.
        assert!(joint_mi_oracle(&[a, b], &[0.5, 0.5], &[0, 1]) - 2f64.ln() < 1e-12);
    }

    #[test]
    fn batchbald_greedy_vs_exhaustive() {
        let mut rng = derive_stream(6, "bb-exhaustive");
        for trial in 0..50 {
            let members = random_members(&mut rng, 4, 6, 2);
            let w = vec![0.25; 4];
            let (picks, values) = batchbald_greedy(&members, &w, 3, 100, 10_000, trial).unwrap();
            for j in 1..=3 {
                let oracle = joint_mi_oracle(&members, &w, &picks[..j]);
                assert!((values[j - 1] - oracle).abs() < 1e-12, "{} vs {oracle}", values[j - 1]);
            }
            let mut best = 0.0f64;
            for a in 0..6 {
                for b in a + 1..6 {
                    for c in b + 1..6 {
                        best = best.max(joint_mi_oracle(&members, &w, &[a, b, c]));
                    }
                }
            }
            assert!(values[2] >= 0.63 * best - 1e-12);
        }
    }

    #[test]
    fn batchbald_sampled_joint_entropy_is_close() {
        let mut rng = derive_stream(7, "bb-mc");
        let members = random_members(&mut rng, 6, 12, 3);
        let w = vec![1.0 / 6.0; 6];
        // Exact only for pairs; later picks use sampled configurations.
        let (picks, values) = batchbald_greedy(&members, &w, 5, 20_000, 9, 1).unwrap();
        let oracle = joint_mi_oracle(&members, &w, &picks);
        assert!((values[4] - oracle).abs() < 0.02, "{} vs {oracle}", values[4]);
        let mut unique = picks.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), 5);
    }

    fn duplicate_instance() -> (LaplacePosterior, Matrix, Vec<usize>) {
        let mut post = LaplacePosterior::prior(2, 2, 1.0).unwrap();
        post.mean = Matrix::from_vec(2, 1, vec![0.0, 0.3]).unwrap();
        let mut rows = vec![vec![1.0, 0.0]; 10];
        rows.push(vec![0.0, 1.0]);
        let mut labels = vec![1; 10];
        labels.push(0);
        (post, Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn sequential_update_moves_past_duplicates() {
        let (post, phi, labels) = duplicate_instance();
        let (picks, _) = select_sequential_update(&post, &phi, &labels, 2, Strategy::Us, 256, 0, Exec::Sequential).unwrap();
        assert_eq!(picks, vec![0, 10]);
        // Top-b on the same scores keeps taking duplicates.
        let (m, v) = post.logit_moments(&phi).unwrap();
        let scores: Vec<f64> = (0..11)
            .map(|i| score_us(mean_field_probs(&m, &v, post.mode, 2).row(i)))
            .collect();
        assert_eq!(select_topb(&scores, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn sequential_with_one_pick_equals_topb() {
        let mut rng = derive_stream(8, "seq-b1");
        let phi = Matrix::from_fn(40, 5, |_, _| rng.normal() * 0.5);
        let labels: Vec<usize> = (0..40).map(|_| rng.below(3)).collect();
        let post = LaplacePosterior::prior(5, 3, 1.0).unwrap().update(&phi, &labels, 2).unwrap();
        for strategy in [Strategy::Us, Strategy::Qbc, Strategy::Bald] {
            let (picks, _) = select_sequential_update(&post, &phi, &labels, 1, strategy, 64, 3, Exec::Parallel).unwrap();
            let (m, v) = post.logit_moments(&phi).unwrap();
            let eps = committee_noise(&post, 64, 3);
            let scores = scores_from_moments(strategy, &post, &m, &v, &eps, None, Exec::Sequential).unwrap();
            assert_eq!(picks, select_topb(&scores, 1).unwrap(), "{strategy:?}");
        }
    }

    #[test]
    fn sequential_variance_downdates_match_direct_moments() {
        let mut rng = derive_stream(9, "seq-var");
        for mode_k in [2usize, 4] {
            let phi = Matrix::from_fn(60, 6, |_, _| rng.normal() * 0.6);
            let labels: Vec<usize> = (0..60).map(|_| rng.below(mode_k)).collect();
            let post = LaplacePosterior::prior(6, mode_k, 1.0).unwrap();
            let (picks, last) = select_sequential_update(&post, &phi, &labels, 8, Strategy::Bald, 32, 1, Exec::Sequential).unwrap();
            let mut unique = picks.clone();
            unique.sort();
            unique.dedup();
            assert_eq!(unique.len(), 8);
            // Replaying the updates yields the same posterior.
            let mut replay = post.clone();
            for &i in &picks[..7] {
                replay = replay.update(&phi.select_rows(&[i]), &labels[i..=i], 1).unwrap();
            }
            assert!(replay.cov.max_abs_diff(&last.cov) < 1e-14);
            // The in-loop variances track the direct ones: rerun with the
            // final posterior's state and compare via a fresh downdate chain.
            let (_, direct_var) = last.logit_moments(&phi).unwrap();
            let (_, mut var) = post.logit_moments(&phi).unwrap();
            let mut cur = post.clone();
            for &i in &picks[..7] {
                let f = phi.row(i);
                let u = cur.cov.matvec(f).unwrap();
                let q = dot(&u, f);
                let next = cur.update(&phi.select_rows(&[i]), &labels[i..=i], 1).unwrap();
                let c = (q - next.cov.quad_form(f)) / (q * q);
                for (v, p) in var.iter_mut().zip(phi.matvec(&u).unwrap()) {
                    *v -= c * p * p;
                }
                cur = next;
            }
            for (a, b) in var.iter().zip(&direct_var) {
                assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn sequential_selection_is_deterministic() {
        let (post, phi, labels) = duplicate_instance();
        let a = select_sequential_update(&post, &phi, &labels, 4, Strategy::Qbc, 64, 11, Exec::Parallel).unwrap();
        let b = select_sequential_update(&post, &phi, &labels, 4, Strategy::Qbc, 64, 11, Exec::Sequential).unwrap();
        assert_eq!(a.0, b.0);
    }

    fn al_fixture() -> (Dataset, Dataset, ModelConfig) {
        let data = gen_two_moons(1400, 0.15, 2).unwrap();
        let scaler = Standardizer::fit(&data.x);
        let data = scaler.transform_dataset(&data).unwrap();
        let (pool, test) = crate::data::holdout_split(&data, 400).unwrap();
        let model = ModelConfig {
            kind: ModelKind::SngpLa,
            backbone: BackboneKind::Identity,
            rff_features: 64,
            kernel_scale: 0.7,
            ..ModelConfig::default()
        };
        (pool, test, model)
    }

    #[test]
    fn al_records_have_the_protocol_shape() {
        let (pool, test, model) = al_fixture();
        for (strategy, mode) in [
            (Strategy::Rand, SelectionMode::TopB),
            (Strategy::Us, SelectionMode::Update),
            (Strategy::Bald, SelectionMode::BatchBald),
        ] {
            let cfg = AlConfig {
                cycles: 3,
                seeds: vec![0, 1],
                candidate_pool: 100,
                committee: 32,
                batchbald_members: 8,
                config_samples: 200,
                strategy,
                mode,
                ..AlConfig::default()
            };
            let recs = run_al(&cfg, &model, &pool, &test, Exec::Parallel).unwrap();
            assert_eq!(recs.len(), 6);
            for r in &recs {
                assert_eq!(r.n_labeled, 16 + 32 * r.cycle);
                assert!((0.0..=1.0).contains(&r.acc));
            }
        }
    }

    #[test]
    fn al_config_rules() {
        let cfg = AlConfig {
            strategy: Strategy::Us,
            mode: SelectionMode::BatchBald,
            ..AlConfig::default()
        };
        assert!(cfg.validate().is_err());
        let (pool, test, model) = al_fixture();
        let cfg = AlConfig {
            cycles: 100,
            ..AlConfig::default()
        };
        assert!(matches!(
            run_al(&cfg, &model, &pool, &test, Exec::Sequential),
            Err(Error::InsufficientPool { .. })
        ));
    }
}
