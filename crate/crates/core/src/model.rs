//! The four Bayesian models compared by the benchmark.
//!
//! | kind       | hypotheses                         | update            |
//! |------------|------------------------------------|-------------------|
//! | `ensemble` | independently trained networks     | MC reweighting    |
//! | `dropout`  | seeded dropout masks of one net    | MC reweighting    |
//! | `sngp_mc`  | samples from the last-layer LA     | MC reweighting    |
//! | `sngp_la`  | the last-layer LA itself           | Gauss-Newton step |

use serde::{Deserialize, Serialize};

use crate::backbone::{ArchConfig, Backbone, OptimizerConfig, HIDDEN};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::laplace::{bridge_alpha, fit_map_irls, LaplacePosterior, Mode};
use crate::mc::{McEnsemble, MemberSource};
use crate::metrics::{entropy_scores, variance_score_dirichlet, variance_scores_mc};
use crate::numerics::{derive_stream, Matrix};
use crate::rff::{RffMap, DEFAULT_FEATURES, DEFAULT_KERNEL_SCALE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ensemble,
    Dropout,
    SngpMc,
    SngpLa,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ensemble => "ensemble",
            ModelKind::Dropout => "dropout",
            ModelKind::SngpMc => "sngp_mc",
            ModelKind::SngpLa => "sngp_la",
        }
    }
}

/// Feature extractor under the SNGP head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Residual MLP with spectral normalization, trained by SGD.
    Mlp,
    /// Random features of the standardized inputs; the head is fit by IRLS.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub backbone: BackboneKind,
    pub ensemble_members: usize,
    pub dropout_members: usize,
    pub dropout_rate: f64,
    pub mc_members: usize,
    pub rff_features: usize,
    pub kernel_scale: f64,
    pub sn_bound: Option<f64>,
    pub prior_precision: f64,
    pub update_steps: usize,
    pub optimizer: OptimizerConfig,
    pub irls_max_steps: usize,
    pub irls_tol: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::SngpLa,
            backbone: BackboneKind::Mlp,
            ensemble_members: 20,
            dropout_members: 1000,
            dropout_rate: 0.5,
            mc_members: 20_000,
            rff_features: DEFAULT_FEATURES,
            kernel_scale: DEFAULT_KERNEL_SCALE,
            sn_bound: Some(0.95),
            prior_precision: 1.0,
            update_steps: 1,
            optimizer: OptimizerConfig::default(),
            irls_max_steps: 100,
            irls_tol: 1e-8,
        }
    }
}

impl ModelConfig {
    pub fn with_kind(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        match self.kind {
            ModelKind::Ensemble if self.ensemble_members == 0 => return bad("ensemble_members must be >= 1"),
            ModelKind::Dropout if self.dropout_members == 0 => return bad("dropout_members must be >= 1"),
            ModelKind::Dropout if !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) => {
                return bad("dropout_rate must be in (0, 1)")
            }
            ModelKind::SngpMc if self.mc_members == 0 => return bad("mc_members must be >= 1"),
            _ => {}
        }
        if self.rff_features == 0 || !(self.kernel_scale > 0.0) {
            return bad("rff_features and kernel_scale must be positive");
        }
        if !(self.prior_precision > 0.0) {
            return bad("prior_precision must be positive");
        }
        if self.update_steps == 0 {
            return bad("update_steps must be >= 1");
        }
        if self.backbone == BackboneKind::Identity && !matches!(self.kind, ModelKind::SngpLa | ModelKind::SngpMc) {
            return bad("the identity backbone applies to SNGP models only");
        }
        Ok(())
    }
}

/// Maps inputs to the features the last-layer posterior reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Extractor {
    Mlp(Backbone),
    Identity(RffMap),
}

impl Extractor {
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Extractor::Mlp(net) => net.features(x),
            Extractor::Identity(map) => map.apply_batch(x),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Mc { kind: ModelKind, ensemble: McEnsemble },
    SngpMc { extractor: Extractor, ensemble: McEnsemble },
    SngpLa { extractor: Extractor, posterior: LaplacePosterior, steps: usize },
}

/// Seed of a named sub-task, derived from the master seed.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    use rand::RngCore;
    derive_stream(seed, tag).next_u64()
}

fn ensure_classes(data: &Dataset, k: usize) -> Result<()> {
    if data.k != k {
        return Err(Error::invalid(format!("dataset has {} classes, model expects {k}", data.k)));
    }
    Ok(())
}

/// Trains the SNGP feature extractor and its last-layer posterior.
fn train_sngp(cfg: &ModelConfig, data: &Dataset, seed: u64) -> Result<(Extractor, LaplacePosterior)> {
    match cfg.backbone {
        BackboneKind::Mlp => {
            let mut arch = ArchConfig::new(data.n_features(), data.k);
            arch.sn_bound = cfg.sn_bound;
            let rff = RffMap::new(HIDDEN, cfg.rff_features, cfg.kernel_scale, sub_seed(seed, "rff"))?;
            let mut net = Backbone::init(arch, sub_seed(seed, "init"))?.with_rff(
                rff,
                cfg.prior_precision,
                sub_seed(seed, "head"),
            )?;
            net.train(data, &cfg.optimizer, sub_seed(seed, "train"))?;
            let phi = net.features(&data.x)?;
            let posterior = LaplacePosterior::fit(net.head_weights(), cfg.prior_precision, &phi)?;
            Ok((Extractor::Mlp(net), posterior))
        }
        BackboneKind::Identity => {
            let rff = RffMap::new(data.n_features(), cfg.rff_features, cfg.kernel_scale, sub_seed(seed, "rff"))?;
            let phi = rff.apply_batch(&data.x)?;
            let map = fit_map_irls(&phi, &data.y, data.k, cfg.prior_precision, cfg.irls_max_steps, cfg.irls_tol)?;
            let posterior = LaplacePosterior::from_map(map, data.k, cfg.prior_precision, &phi)?;
            Ok((Extractor::Identity(rff), posterior))
        }
    }
}

impl Model {
    /// Trains a model from scratch; everything random derives from `seed`.
    pub fn train(cfg: &ModelConfig, data: &Dataset, seed: u64, exec: Exec) -> Result<Model> {
        cfg.validate()?;
        match cfg.kind {
            ModelKind::Ensemble => {
                let arch = ArchConfig::new(data.n_features(), data.k);
                let nets = exec.map(cfg.ensemble_members, |j| -> Result<Backbone> {
                    let member = sub_seed(seed, &format!("ensemble/member-{j}"));
                    let mut net = Backbone::init(arch.clone(), sub_seed(member, "init"))?;
                    net.train(data, &cfg.optimizer, sub_seed(member, "train"))?;
                    Ok(net)
                });
                let nets = nets.into_iter().collect::<Result<Vec<_>>>()?;
                Ok(Model::Mc {
                    kind: ModelKind::Ensemble,
                    ensemble: McEnsemble::new(MemberSource::Ensemble(nets))?,
                })
            }
            ModelKind::Dropout => {
                let mut arch = ArchConfig::new(data.n_features(), data.k);
                arch.dropout_rate = cfg.dropout_rate;
                let mut net = Backbone::init(arch, sub_seed(seed, "init"))?;
                net.train(data, &cfg.optimizer, sub_seed(seed, "train"))?;
                let source = MemberSource::Dropout {
                    net,
                    members: cfg.dropout_members,
                    seed: sub_seed(seed, "dropout-masks"),
                };
                Ok(Model::Mc {
                    kind: ModelKind::Dropout,
                    ensemble: McEnsemble::new(source)?,
                })
            }
            ModelKind::SngpMc => {
                let (extractor, posterior) = train_sngp(cfg, data, seed)?;
                let weights = posterior.sample_members(cfg.mc_members, sub_seed(seed, "members"))?;
                let source = MemberSource::Sampled {
                    weights,
                    mode: posterior.mode,
                    classes: posterior.classes,
                };
                Ok(Model::SngpMc {
                    extractor,
                    ensemble: McEnsemble::new(source)?,
                })
            }
            ModelKind::SngpLa => {
                let (extractor, posterior) = train_sngp(cfg, data, seed)?;
                Ok(Model::SngpLa {
                    extractor,
                    posterior,
                    steps: cfg.update_steps,
                })
            }
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Mc { kind, .. } => *kind,
            Model::SngpMc { .. } => ModelKind::SngpMc,
            Model::SngpLa { .. } => ModelKind::SngpLa,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Model::Mc { ensemble, .. } | Model::SngpMc { ensemble, .. } => match &ensemble.source {
                MemberSource::Ensemble(nets) => nets[0].arch().classes,
                MemberSource::Dropout { net, .. } => net.arch().classes,
                MemberSource::Sampled { classes, .. } => *classes,
            },
            Model::SngpLa { posterior, .. } => posterior.classes,
        }
    }

    /// Bayesian update on new labelled data; returns the updated model.
    pub fn update(&self, new: &Dataset, exec: Exec) -> Result<Model> {
        ensure_classes(new, self.classes())?;
        match self {
            Model::Mc { kind, ensemble } => Ok(Model::Mc {
                kind: *kind,
                ensemble: ensemble.update(&new.x, &new.y, exec)?,
            }),
            Model::SngpMc { extractor, ensemble } => {
                let phi = extractor.features(&new.x)?;
                Ok(Model::SngpMc {
                    extractor: extractor.clone(),
                    ensemble: ensemble.update(&phi, &new.y, exec)?,
                })
            }
            Model::SngpLa {
                extractor,
                posterior,
                steps,
            } => {
                let phi = extractor.features(&new.x)?;
                Ok(Model::SngpLa {
                    extractor: extractor.clone(),
                    posterior: posterior.update(&phi, &new.y, *steps)?,
                    steps: *steps,
                })
            }
        }
    }

    /// Predictive class probabilities.
    pub fn predict(&self, x: &Matrix, exec: Exec) -> Result<Matrix> {
        match self {
            Model::Mc { ensemble, .. } => ensemble.predict(x, exec),
            Model::SngpMc { extractor, ensemble } => ensemble.predict(&extractor.features(x)?, exec),
            Model::SngpLa {
                extractor, posterior, ..
            } => posterior.predict_mean_field(&extractor.features(x)?),
        }
    }

    /// Predictive probabilities together with entropy and variance OOD scores.
    pub fn predict_with_scores(&self, x: &Matrix, exec: Exec) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
        let (probs, variance) = match self {
            Model::Mc { ensemble, .. } => mc_scores(ensemble, x, exec)?,
            Model::SngpMc { extractor, ensemble } => mc_scores(ensemble, &extractor.features(x)?, exec)?,
            Model::SngpLa {
                extractor, posterior, ..
            } => {
                let phi = extractor.features(x)?;
                let probs = posterior.predict_mean_field(&phi)?;
                (probs, dirichlet_scores(posterior, &phi)?)
            }
        };
        let entropy = entropy_scores(&probs);
        Ok((probs, entropy, variance))
    }

    /// Effective sample size of the member weights (MC models only).
    pub fn ess(&self) -> Option<f64> {
        match self {
            Model::Mc { ensemble, .. } | Model::SngpMc { ensemble, .. } => Some(ensemble.ess()),
            Model::SngpLa { .. } => None,
        }
    }
}

fn mc_scores(ensemble: &McEnsemble, input: &Matrix, exec: Exec) -> Result<(Matrix, Vec<f64>)> {
    let members = ensemble.source.member_probs(input, exec)?;
    let probs = crate::mc::predict_weighted(&members, &ensemble.log_weights)?;
    let variance = variance_scores_mc(&members, &ensemble.log_weights);
    Ok((probs, variance))
}

/// Laplace-bridge Dirichlet variance per row. A binary posterior is expressed
/// as two independent logits `(0, m)` with variance `v/2` each, whose
/// difference has the posterior's logit law `N(m, v)`.
fn dirichlet_scores(posterior: &LaplacePosterior, phi: &Matrix) -> Result<Vec<f64>> {
    let (means, var) = posterior.logit_moments(phi)?;
    (0..phi.rows())
        .map(|r| {
            let v = var[r].max(1e-12);
            let alpha = match posterior.mode {
                Mode::Binary => bridge_alpha(&[0.0, means.get(r, 0)], v / 2.0)?,
                Mode::Multiclass => bridge_alpha(means.row(r), v)?,
            };
            Ok(variance_score_dirichlet(&alpha))
        })
        .collect()
}
