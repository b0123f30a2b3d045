//! Variational Bayesian networks over dense and convolutional layers,
//! trained by stochastic variational inference, with a layer-wise
//! initializer that seeds the mean-field posterior from closed-form
//! Bayesian linear regressions (plus the usual competing initializers).
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`], [`rng`], [`conv`]: dense matrices, Cholesky/SPD solves,
//!   counter-based seeded randomness and patch extraction.
//! - [`blm`]: conjugate Bayesian linear regression (homoscedastic and
//!   heteroscedastic), its best fully factorized projection, and the
//!   log-Normal label transform for classification targets.
//! - [`net`]: mean-field Gaussian layers, sampling and local
//!   reparameterization forwards, the NELBO and its analytic gradients,
//!   bit-exact checkpoints.
//! - [`init`]: the iterative Bayesian linear model initializer and five
//!   baselines (uninformative, heuristic, Xavier, orthogonal, LSUV).
//! - [`train`]: Adam, KL annealing, the training loop and test metrics.
//!
//! With the default `parallel` feature, per-neuron regression fits,
//! Monte Carlo objective samples and metric evaluations run on rayon;
//! results are bit-identical to the sequential build.

#![allow(clippy::needless_range_loop)]

pub mod blm;
pub mod conv;
pub mod error;
pub mod init;
pub mod linalg;
pub mod net;
pub(crate) mod par;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
pub use rng::Rng;
