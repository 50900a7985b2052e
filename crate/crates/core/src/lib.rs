//! Covariate-assisted clustering of subjects by their covariance matrices.
//!
//! Each subject contributes a `T_i × p` series (or its covariance `S_i`), a
//! variance-model design `x_i` and a gating design `w_i`. A projection `γ`
//! reduces every series to a scalar whose log-variance follows a
//! cluster-specific regression on `x_i`, while cluster membership follows a
//! multinomial logistic regression on `w_i`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod bootstrap;
pub mod components;
pub mod dataset;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod mixture;
pub mod perm;
pub mod rng;
pub mod selection;
pub mod serde_util;
pub mod simgen;
pub mod study;

pub use dataset::{Dataset, SubjectRecord};
pub use error::{Error, Result};
pub use mixture::{EmConfig, FitResult, ModelParams, Responsibilities};
