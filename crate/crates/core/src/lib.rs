//! Fast Bayesian updates for last-layer Bayesian neural networks.
//!
//! Two update families are provided:
//!
//! - **Monte-Carlo reweighting** ([`mc`]): an ensemble of sampled hypotheses
//!   (deep ensemble members, dropout masks, or last-layer weight samples) is
//!   reweighted by its likelihood on new data.
//! - **Last-layer Laplace** ([`laplace`]): a Gaussian posterior over the output
//!   layer on random Fourier features is moved by Gauss-Newton steps, with the
//!   covariance updated by exact rank-1 Sherman-Morrison downdates.
//!
//! Around these sit a small residual MLP backbone with manual gradients
//! ([`backbone`]), the random feature map ([`rff`]), evaluation metrics
//! ([`metrics`]), active-learning query strategies ([`active`]) and the
//! experiment runner behind the `bupd` binary ([`runner`]).

pub mod active;
pub mod backbone;
pub mod data;
pub mod error;
pub mod exec;
pub mod laplace;
pub mod mc;
pub mod model;
pub mod metrics;
pub mod numerics;
pub mod rff;
pub mod runner;

pub use error::{Error, Result};
pub use numerics::Matrix;
