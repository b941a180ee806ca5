//! Semi-supervised continual learning: MLP classifiers trained over a task
//! sequence, a gradient learner that maps logits to logit-space gradients, and
//! the supporting continual strategies, pseudo-labeling baselines and metrics.

// Validation is written as `!(x > 0.0)` on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod container;
pub mod continual;
pub mod error;
pub mod learner;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod mlp;
pub mod pseudo_label;
pub mod seeding;
pub mod stream;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use loss::LossValue;
pub use mlp::{Activation, MlpModel, ParamGrads, Tape};
