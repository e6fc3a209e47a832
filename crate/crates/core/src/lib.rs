//! Meta-learning toolkit built around an adaptive inner-loop update rule:
//! per-step, per-layer learning rates and weight-decay coefficients produced
//! by a small meta-network conditioned on the learner's weights and
//! gradients, alongside plain MAML-style baselines.
//!
//! Layout:
//! - [`autodiff`]: reverse-mode tape with differentiable backward passes
//! - [`learner`]: purely functional MLP base learners
//! - [`state`]: reduction of (gradients, weights) to the 2N conditioning vector
//! - [`hypergen`]: the hyperparameter generator network and its post-multipliers
//! - [`inner_loop`]: fast adaptation under configurable update rules
//! - [`trainer`]: the outer loop, evaluation, and the Adam/SGD meta-optimizers
//! - [`tasks`]: seeded sinusoid-regression and blob-classification families
//! - [`checkpoint`]: versioned checkpoint file and trajectory CSV export
//! - [`config`]: the on-disk JSON run configuration
//! - [`gradcheck`]: finite-difference verification suites

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod hypergen;
pub mod inner_loop;
pub mod learner;
pub mod rng;
pub mod state;
pub mod tasks;
pub mod trainer;

pub use autodiff::{Graph, GradOpts, Tensor};
pub use element::{Dtype, Element};
pub use error::{Error, Result};
