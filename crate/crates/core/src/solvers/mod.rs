//! Penalized solvers used by the fitting loop.

pub mod glasso;
pub mod group_lasso;
pub mod lasso;
pub mod mixed_model;
pub mod ols;

pub use glasso::{alpha_from_precision, graphical_lasso, graphical_lasso_with, GlassoOptions, PrecisionEstimate};
pub use group_lasso::{
    group_lasso_smooth, group_lasso_smooth_with, problem_from_blocks, CenteredGram, FactorKind, GroupLassoFit, GroupLassoProblem, GroupedGram,
    SmoothBlock,
};
pub use lasso::{lasso, lasso_with, LassoFit, SolverOptions};
pub use mixed_model::{mixed_model_refit, MixedModelFit};
pub use ols::{ols_refit, OlsFit};
