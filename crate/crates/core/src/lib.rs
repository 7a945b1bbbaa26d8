//! Multivariate sparse additive regression with joint precision estimation.
//!
//! Each response is modeled as an intercept plus, for every covariate, a
//! null, linear or nonlinear effect. Nonlinear effects live in a penalized
//! spline basis. Correlation between responses enters through a sparse
//! precision matrix of the errors, estimated alongside the mean model.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
mod linalg;
pub mod model;
pub mod simulation;
pub mod solvers;
pub mod spline_basis;
pub mod tuning;

pub use error::{Error, Result};
pub use model::{
    classify, fit, objective, predict, predict_state, residual_target_linear, residual_target_nonlinear,
    AdditiveDesign, Effect, EffectLabels, FitConfig, FitReport, Mode, ModelState, Penalties, PenaltySpec,
    PrecisionPenalty,
};
pub use solvers::PrecisionEstimate;
pub use spline_basis::{CovariateBasis, DRBasis, KnotSet};
