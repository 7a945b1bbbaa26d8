//! The joint fitting loop and its marginal special case.
//!
//! Response `q` is modeled as
//! `y_q = b0_q + sum_j (z_j beta_jq + U_j gamma_jq) + e_q` with correlated
//! errors `e ~ N(0, P^-1)`. Writing `e_q` as a regression on the other
//! responses' errors with coefficients `alpha_q = -P[-q, q] / P[q, q]`
//! decouples the responses, so each iteration updates all responses in
//! parallel from the previous state:
//!
//! 1. lasso selection of linear effects, then an OLS refit;
//! 2. group lasso selection of nonlinear effects, then a mixed-model refit;
//! 3. graphical lasso on the residual covariance.
//!
//! The marginal mode keeps `P = I` and skips step 3.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{log_det_pd, select_columns};
use crate::solvers::{
    alpha_from_precision, graphical_lasso_with, lasso_with, mixed_model_refit, ols_refit, FactorKind,
    GlassoOptions, GroupLassoProblem, PrecisionEstimate, SmoothBlock, SolverOptions,
};
use crate::spline_basis::{default_gcv_grid, gcv_lambda3, CovariateBasis, DRBasis};
use crate::tuning::{
    cv_glasso, cv_group_lasso, cv_lasso, empirical_covariance, CVRecord, FoldPlan, GroupDesign,
    PathSettings,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Joint estimation of the mean model and the error precision.
    #[default]
    Compadre,
    /// Independent responses (precision fixed at the identity).
    Padre,
}

/// Per-response penalty: chosen by cross-validation or fixed. A fixed
/// vector of length one applies to every response.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum PenaltySpec {
    #[default]
    Cv,
    Fixed(Vec<f64>),
}

impl PenaltySpec {
    fn fixed_for(&self, q: usize) -> Option<f64> {
        match self {
            PenaltySpec::Cv => None,
            PenaltySpec::Fixed(v) if v.len() == 1 => Some(v[0]),
            PenaltySpec::Fixed(v) => Some(v[q]),
        }
    }

    fn validate(&self, name: &str, responses: usize) -> Result<()> {
        if let PenaltySpec::Fixed(v) = self {
            if v.len() != 1 && v.len() != responses {
                return Err(Error::InvalidConfig(format!(
                    "{name} needs 1 or {responses} values, got {}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PrecisionPenalty {
    #[default]
    Cv,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub mode: Mode,
    pub lambda1: PenaltySpec,
    pub lambda2: PenaltySpec,
    pub lambda4: PrecisionPenalty,
    pub max_iters: usize,
    /// Convergence threshold on the change in mean squared error.
    pub tol: f64,
    pub folds: usize,
    pub path: PathSettings,
    pub seed: u64,
    /// Run cross-validation in the first iteration only.
    pub select_once: bool,
    pub interior_knots: usize,
    pub gcv_grid: Vec<f64>,
    pub lasso: SolverOptions,
    pub group_lasso: SolverOptions,
    pub glasso: GlassoOptions,
    pub factor: FactorKind,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Compadre,
            lambda1: PenaltySpec::Cv,
            lambda2: PenaltySpec::Cv,
            lambda4: PrecisionPenalty::Cv,
            max_iters: 5,
            tol: 1e-4,
            folds: 5,
            path: PathSettings::default(),
            seed: 0,
            select_once: false,
            interior_knots: 9,
            gcv_grid: default_gcv_grid(),
            lasso: SolverOptions::lasso(),
            group_lasso: SolverOptions::group_lasso(),
            glasso: GlassoOptions::default(),
            factor: FactorKind::Cholesky,
        }
    }
}

impl FitConfig {
    pub fn validate(&self, responses: usize) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("tol must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig("at least 2 folds are required".into()));
        }
        if self.gcv_grid.is_empty() || self.gcv_grid.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidConfig("GCV grid must be nonempty and nonnegative".into()));
        }
        if self.interior_knots == 0 {
            return Err(Error::InvalidConfig("at least one interior knot is required".into()));
        }
        self.lambda1.validate("lambda1", responses)?;
        self.lambda2.validate("lambda2", responses)?;
        if let PrecisionPenalty::Fixed(v) = self.lambda4 {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig("lambda4 must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Linear and nonlinear design columns for every covariate.
#[derive(Debug, Clone)]
pub struct AdditiveDesign {
    /// n x p standardized covariates.
    pub linear: DMatrix<f64>,
    /// One n x (k-2) block per covariate.
    pub nonlinear: Vec<DMatrix<f64>>,
    pub bases: Vec<CovariateBasis>,
}

impl AdditiveDesign {
    pub fn from_covariates(x: &DMatrix<f64>, interior_knots: usize) -> Result<Self> {
        let (n, p) = x.shape();
        let drs: Vec<DRBasis> = (0..p)
            .into_par_iter()
            .map(|j| DRBasis::from_covariate(x.column(j).as_slice(), interior_knots))
            .collect::<Result<_>>()?;
        let mut linear = DMatrix::zeros(n, p);
        for (j, dr) in drs.iter().enumerate() {
            linear.set_column(j, &dr.linear_col);
        }
        let (nonlinear, bases) = drs.into_iter().map(|d| (d.nonlinear_cols, d.basis)).unzip();
        Ok(Self {
            linear,
            nonlinear,
            bases,
        })
    }

    /// Design at new raw covariate values, using stored bases.
    pub fn evaluate(bases: &[CovariateBasis], x: &DMatrix<f64>) -> Result<Self> {
        let (n, p) = x.shape();
        if p != bases.len() {
            return Err(Error::DimensionMismatch(format!(
                "model has {} covariates, data has {p}",
                bases.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariates"));
        }
        let linear = DMatrix::from_fn(n, p, |i, j| bases[j].standardize_value(x[(i, j)]));
        let nonlinear = (0..p)
            .map(|j| bases[j].nonlinear_design(x.column(j).as_slice()))
            .collect();
        Ok(Self {
            linear,
            nonlinear,
            bases: bases.to_vec(),
        })
    }

    pub fn n(&self) -> usize {
        self.linear.nrows()
    }

    pub fn p(&self) -> usize {
        self.linear.ncols()
    }
}

/// Coefficients and precision at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// p x Q linear coefficients on the standardized scale.
    pub beta_lin: DMatrix<f64>,
    /// `beta_nl[q][j]`: nonlinear block of covariate j for response q.
    pub beta_nl: Vec<Vec<DVector<f64>>>,
    pub intercepts: DVector<f64>,
    pub precision: PrecisionEstimate,
    /// p x Q smoothing parameters.
    pub lambda3: DMatrix<f64>,
}

impl ModelState {
    /// Zero coefficients, identity precision and column-mean intercepts.
    pub fn initial(y: &DMatrix<f64>, widths: &[usize], lambda3: DMatrix<f64>) -> Self {
        let q = y.ncols();
        let n = y.nrows() as f64;
        Self {
            beta_lin: DMatrix::zeros(widths.len(), q),
            beta_nl: (0..q)
                .map(|_| widths.iter().map(|&d| DVector::zeros(d)).collect())
                .collect(),
            intercepts: DVector::from_iterator(q, y.column_iter().map(|c| c.sum() / n)),
            precision: PrecisionEstimate::identity(q),
            lambda3,
        }
    }

    pub fn num_responses(&self) -> usize {
        self.beta_lin.ncols()
    }

    pub fn num_covariates(&self) -> usize {
        self.beta_lin.nrows()
    }

    /// Contribution of covariate `j` to response `q`, without intercept.
    pub fn component(&self, design: &AdditiveDesign, j: usize, q: usize) -> DVector<f64> {
        let mut f = design.linear.column(j) * self.beta_lin[(j, q)];
        let b = &self.beta_nl[q][j];
        if b.iter().any(|&v| v != 0.0) {
            f += &design.nonlinear[j] * b;
        }
        f
    }

    pub fn fitted_response(&self, design: &AdditiveDesign, q: usize) -> DVector<f64> {
        let mut f = &design.linear * self.beta_lin.column(q);
        f.add_scalar_mut(self.intercepts[q]);
        for (j, b) in self.beta_nl[q].iter().enumerate() {
            if b.iter().any(|&v| v != 0.0) {
                f += &design.nonlinear[j] * b;
            }
        }
        f
    }

    pub fn fitted(&self, design: &AdditiveDesign) -> DMatrix<f64> {
        let q = self.num_responses();
        let mut out = DMatrix::zeros(design.n(), q);
        for r in 0..q {
            out.set_column(r, &self.fitted_response(design, r));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Effect {
    Null,
    Linear,
    Nonlinear,
}

impl Effect {
    pub fn is_selected(self) -> bool {
        self != Effect::Null
    }

    pub fn code(self) -> &'static str {
        match self {
            Effect::Null => "N",
            Effect::Linear => "L",
            Effect::Nonlinear => "NL",
        }
    }
}

/// Effect type of every (covariate, response) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EffectLabels {
    p: usize,
    q: usize,
    labels: Vec<Effect>,
}

impl EffectLabels {
    pub fn new(p: usize, q: usize, labels: Vec<Effect>) -> Result<Self> {
        if labels.len() != p * q {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {p} covariates and {q} responses",
                labels.len()
            )));
        }
        Ok(Self { p, q, labels })
    }

    pub fn get(&self, j: usize, q: usize) -> Effect {
        self.labels[j * self.q + q]
    }

    pub fn num_covariates(&self) -> usize {
        self.p
    }

    pub fn num_responses(&self) -> usize {
        self.q
    }

    pub fn count(&self, effect: Effect) -> usize {
        self.labels.iter().filter(|&&e| e == effect).count()
    }
}

pub fn classify(state: &ModelState) -> EffectLabels {
    let (p, q) = (state.num_covariates(), state.num_responses());
    let mut labels = Vec::with_capacity(p * q);
    for j in 0..p {
        for r in 0..q {
            let label = if state.beta_nl[r][j].iter().any(|&v| v != 0.0) {
                Effect::Nonlinear
            } else if state.beta_lin[(j, r)] != 0.0 {
                Effect::Linear
            } else {
                Effect::Null
            };
            labels.push(label);
        }
    }
    EffectLabels { p, q, labels }
}

/// Residual matrix `Y - fitted`.
fn residuals(state: &ModelState, y: &DMatrix<f64>, design: &AdditiveDesign) -> DMatrix<f64> {
    y - state.fitted(design)
}

/// `E[, -q] alpha_q`, or `None` when `alpha_q` vanishes.
fn cross_correction(state: &ModelState, resid: &DMatrix<f64>, q: usize) -> Option<DVector<f64>> {
    if state.num_responses() < 2 {
        return None;
    }
    let (alpha, _) = alpha_from_precision(&state.precision, q);
    if alpha.iter().all(|&a| a == 0.0) {
        return None;
    }
    let mut out = DVector::zeros(resid.nrows());
    let others = (0..state.num_responses()).filter(|&r| r != q);
    for (a, r) in alpha.iter().zip(others) {
        if *a != 0.0 {
            out.axpy(*a, &resid.column(r), 1.0);
        }
    }
    Some(out)
}

fn check_shapes(state: &ModelState, y: &DMatrix<f64>, design: &AdditiveDesign) -> Result<()> {
    if y.nrows() != design.n()
        || y.ncols() != state.num_responses()
        || design.p() != state.num_covariates()
        || state.precision.dim() != y.ncols()
    {
        return Err(Error::DimensionMismatch(
            "state, responses and design disagree".into(),
        ));
    }
    Ok(())
}

fn nonlinear_part(state: &ModelState, design: &AdditiveDesign, q: usize) -> DVector<f64> {
    let mut out = DVector::zeros(design.n());
    for (j, b) in state.beta_nl[q].iter().enumerate() {
        if b.iter().any(|&v| v != 0.0) {
            out += &design.nonlinear[j] * b;
        }
    }
    out
}

/// Target for the linear selection step of response `q`:
/// `Y_q - U beta_nl_q - E[, -q] alpha_q` with `E = Y - fitted`.
pub fn residual_target_linear(
    q: usize,
    state: &ModelState,
    y: &DMatrix<f64>,
    design: &AdditiveDesign,
) -> Result<DVector<f64>> {
    check_shapes(state, y, design)?;
    let resid = residuals(state, y, design);
    Ok(linear_target(q, state, y, design, &resid))
}

fn linear_target(
    q: usize,
    state: &ModelState,
    y: &DMatrix<f64>,
    design: &AdditiveDesign,
    resid: &DMatrix<f64>,
) -> DVector<f64> {
    let mut t = y.column(q) - nonlinear_part(state, design, q);
    if let Some(c) = cross_correction(state, resid, q) {
        t -= c;
    }
    t
}

/// Target for the nonlinear selection step of response `q`:
/// `Y_q - b0_q - X beta_lin_q - E[, -q] alpha_q`.
pub fn residual_target_nonlinear(
    q: usize,
    state: &ModelState,
    y: &DMatrix<f64>,
    design: &AdditiveDesign,
) -> Result<DVector<f64>> {
    check_shapes(state, y, design)?;
    let resid = residuals(state, y, design);
    Ok(nonlinear_target(q, state, y, design, &resid))
}

fn nonlinear_target(
    q: usize,
    state: &ModelState,
    y: &DMatrix<f64>,
    design: &AdditiveDesign,
    resid: &DMatrix<f64>,
) -> DVector<f64> {
    let mut t = y.column(q) - &design.linear * state.beta_lin.column(q);
    t.add_scalar_mut(-state.intercepts[q]);
    if let Some(c) = cross_correction(state, resid, q) {
        t -= c;
    }
    t
}

/// Target for the refit step: `Y_q - E[, -q] alpha_q`.
fn refit_target(q: usize, state: &ModelState, y: &DMatrix<f64>, resid: &DMatrix<f64>) -> DVector<f64> {
    let mut t = y.column(q).clone_owned();
    if let Some(c) = cross_correction(state, resid, q) {
        t -= c;
    }
    t
}

/// Penalty levels entering the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalties {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub lambda4: f64,
}

impl Penalties {
    pub fn zero(q: usize) -> Self {
        Self {
            lambda1: vec![0.0; q],
            lambda2: vec![0.0; q],
            lambda4: 0.0,
        }
    }
}

/// Penalized negative log-likelihood
/// `tr(R'R P / n) - log det P + sum_q lambda1_q ||beta_lin_q||_1
///  + sum_q lambda2_q sum_j sqrt(||U_j b_jq||^2 / n + lambda3_jq b_jq' Gamma_j b_jq / n)
///  + lambda4 sum_{a != b} |P_ab|`.
pub fn objective(
    state: &ModelState,
    y: &DMatrix<f64>,
    design: &AdditiveDesign,
    penalties: &Penalties,
) -> Result<f64> {
    check_shapes(state, y, design)?;
    let q = state.num_responses();
    if penalties.lambda1.len() != q || penalties.lambda2.len() != q {
        return Err(Error::DimensionMismatch("one penalty per response is required".into()));
    }
    let n = y.nrows() as f64;
    let p_mat = &state.precision.precision;
    let ld = log_det_pd(p_mat).ok_or(Error::NonPdPrecision)?;
    let resid = residuals(state, y, design);
    let mut value = (resid.tr_mul(&resid) / n).component_mul(p_mat).sum() - ld;
    for r in 0..q {
        value += penalties.lambda1[r] * state.beta_lin.column(r).iter().map(|b| b.abs()).sum::<f64>();
        let mut group = 0.0;
        for (j, b) in state.beta_nl[r].iter().enumerate() {
            if b.iter().all(|&v| v == 0.0) {
                continue;
            }
            let energy = (&design.nonlinear[j] * b).norm_squared() / n;
            let gamma = &design.bases[j].gamma_nl;
            let smooth: f64 = b.iter().zip(gamma.iter()).map(|(c, g)| c * c * g).sum();
            group += (energy + state.lambda3[(j, r)] * smooth / n).sqrt();
        }
        value += penalties.lambda2[r] * group;
    }
    let mut off = 0.0;
    for a in 0..q {
        for b in 0..q {
            if a != b {
                off += p_mat[(a, b)].abs();
            }
        }
    }
    Ok(value + penalties.lambda4 * off)
}

/// Penalties and CV summaries chosen for one response in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTuning {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda1_cv: Option<CVRecord>,
    pub lambda2_cv: Option<CVRecord>,
    pub lasso_converged: bool,
    pub group_converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTuning {
    pub responses: Vec<ResponseTuning>,
    pub lambda4: Option<f64>,
    pub lambda4_cv: Option<CVRecord>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub state: ModelState,
    pub labels: EffectLabels,
    /// n x Q fitted means.
    pub fitted: DMatrix<f64>,
    pub mse_trace: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub tuning: Vec<IterationTuning>,
    pub converged: bool,
    pub bases: Vec<CovariateBasis>,
}

impl PartialEq for FitReport {
    fn eq(&self, other: &Self) -> bool {
        self.state == other.state
            && self.labels == other.labels
            && self.fitted == other.fitted
            && self.mse_trace == other.mse_trace
            && self.objective_trace == other.objective_trace
            && self.tuning == other.tuning
            && self.converged == other.converged
            && self.bases == other.bases
    }
}

/// Solve along `lambdas[..=upto]` with warm starts and return the last fit.
fn lasso_along(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambdas: &[f64],
    opts: &SolverOptions,
) -> Result<crate::solvers::LassoFit> {
    let mut warm: Option<DVector<f64>> = None;
    let mut last = None;
    for &l in lambdas {
        let fit = lasso_with(x, y, l, opts, warm.as_ref())?;
        warm = Some(fit.coefs.clone());
        last = Some(fit);
    }
    last.ok_or_else(|| Error::InvalidConfig("empty penalty path".into()))
}

struct LinearStep {
    selected: Vec<usize>,
    intercept: f64,
    coefs: DVector<f64>,
    lambda1: f64,
    cv: Option<CVRecord>,
    converged: bool,
}

struct NonlinearStep {
    blocks: Vec<DVector<f64>>,
    lambda2: f64,
    cv: Option<CVRecord>,
    converged: bool,
}

struct Workspace<'a> {
    y: &'a DMatrix<f64>,
    design: &'a AdditiveDesign,
    config: &'a FitConfig,
    plan: FoldPlan,
    groups: GroupDesign,
}

impl Workspace<'_> {
    /// Steps 1 and 1.5 for response `q`.
    fn linear_step(&self, q: usize, state: &ModelState, resid: &DMatrix<f64>, reuse: Option<f64>) -> Result<LinearStep> {
        let cfg = self.config;
        let target = linear_target(q, state, self.y, self.design, resid);
        let x = &self.design.linear;
        let (lambda1, cv, fit) = match (cfg.lambda1.fixed_for(q), reuse) {
            (Some(l), _) | (None, Some(l)) => (l, None, lasso_with(x, &target, l, &cfg.lasso, None)?),
            (None, None) => {
                let rec = cv_lasso(x, &target, &self.plan, cfg.path, &cfg.lasso)?;
                let fit = lasso_along(x, &target, &rec.lambdas[..=rec.chosen], &cfg.lasso)?;
                (rec.chosen_lambda(), Some(rec), fit)
            }
        };
        if !fit.converged {
            warn!("lasso for response {q} stopped after {} sweeps", fit.sweeps);
        }
        let selected = fit.active_set.clone();
        let (intercept, coefs) = refit_linear(x, &target, &selected)?;
        Ok(LinearStep {
            selected,
            intercept,
            coefs,
            lambda1,
            cv,
            converged: fit.converged,
        })
    }

    /// Step 2 for response `q`.
    fn nonlinear_step(
        &self,
        q: usize,
        state: &ModelState,
        resid: &DMatrix<f64>,
        reuse: Option<f64>,
        guard_p: Option<usize>,
    ) -> Result<NonlinearStep> {
        let cfg = self.config;
        let n = self.design.n() as f64;
        let target = nonlinear_target(q, state, self.y, self.design, resid);
        let gammas: Vec<&DVector<f64>> = self.design.bases.iter().map(|b| &b.gamma_nl).collect();
        let lambda3: Vec<f64> = state.lambda3.column(q).iter().map(|l| l / n).collect();
        let fixed = cfg.lambda2.fixed_for(q).or(reuse);
        let (lambda2, cv, problem, lambdas) = match fixed {
            Some(l) => {
                let problem = GroupLassoProblem::new(&self.groups.gram(None, &target), &gammas, &lambda3, cfg.factor)?;
                (l, None, problem, vec![l])
            }
            None => {
                let (rec, problem) = cv_group_lasso(
                    &self.groups,
                    &gammas,
                    &lambda3,
                    &target,
                    cfg.path,
                    guard_p,
                    &cfg.group_lasso,
                    cfg.factor,
                )?;
                let lambdas = rec.lambdas[..=rec.chosen].to_vec();
                (rec.chosen_lambda(), Some(rec), problem, lambdas)
            }
        };
        let mut warm: Option<Vec<DVector<f64>>> = None;
        let mut sol = None;
        for &l in &lambdas {
            let s = problem.solve(l, warm.as_deref(), &cfg.group_lasso);
            warm = Some(s.theta.clone());
            sol = Some(s);
        }
        let fit = problem.to_fit(&sol.expect("path is nonempty"));
        if !fit.converged {
            warn!("group lasso for response {q} stopped after {} sweeps", fit.sweeps);
        }
        Ok(NonlinearStep {
            blocks: fit.blocks,
            lambda2,
            cv,
            converged: fit.converged,
        })
    }

    /// Step 2.5 for response `q`: returns intercept, linear coefficients and
    /// nonlinear blocks.
    fn refit_step(
        &self,
        q: usize,
        state: &ModelState,
        resid: &DMatrix<f64>,
        linear: &[usize],
    ) -> Result<(f64, DVector<f64>, Vec<DVector<f64>>)> {
        let target = refit_target(q, state, self.y, resid);
        let active: Vec<usize> = (0..self.design.p())
            .filter(|&j| state.beta_nl[q][j].iter().any(|&v| v != 0.0))
            .collect();
        let fixed = with_ones(&select_columns(&self.design.linear, linear));
        let blocks: Vec<SmoothBlock> = active
            .iter()
            .map(|&j| SmoothBlock {
                design: &self.design.nonlinear[j],
                gamma: &self.design.bases[j].gamma_nl,
                lambda3: state.lambda3[(j, q)],
            })
            .collect();
        let fit = mixed_model_refit(&fixed, &blocks, &target)?;
        let mut coefs = DVector::zeros(self.design.p());
        for (i, &j) in linear.iter().enumerate() {
            coefs[j] = fit.linear_coefs[i + 1];
        }
        let mut nl: Vec<DVector<f64>> = state.beta_nl[q].iter().map(|b| DVector::zeros(b.len())).collect();
        for (b, &j) in fit.nonlinear_coefs.into_iter().zip(&active) {
            nl[j] = b;
        }
        Ok((fit.linear_coefs[0], coefs, nl))
    }
}

fn with_ones(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::from_element(x.nrows(), x.ncols() + 1, 1.0);
    out.view_mut((0, 1), x.shape()).copy_from(x);
    out
}

/// OLS of `y` on an intercept and the selected columns.
fn refit_linear(x: &DMatrix<f64>, y: &DVector<f64>, selected: &[usize]) -> Result<(f64, DVector<f64>)> {
    let design = with_ones(&select_columns(x, selected));
    let fit = ols_refit(&design, y)?;
    let mut coefs = DVector::zeros(x.ncols());
    for (i, &j) in selected.iter().enumerate() {
        coefs[j] = fit.coefs[i + 1];
    }
    Ok((fit.coefs[0], coefs))
}

/// Mean squared error of the conditional predictions
/// `fitted_q + E_{-q} alpha_q`, whose residual is `(E P)_q / P[q, q]`.
/// With `P = I` this is the plain residual mean square.
pub fn conditional_mse(resid: &DMatrix<f64>, precision: &PrecisionEstimate) -> f64 {
    if precision.is_identity() {
        return resid.norm_squared() / resid.len() as f64;
    }
    let p = &precision.precision;
    let mut scaled = resid * p;
    for (q, mut col) in scaled.column_iter_mut().enumerate() {
        col /= p[(q, q)];
    }
    scaled.norm_squared() / resid.len() as f64
}

/// Fit the model to responses `y` (n x Q) and raw covariates `x` (n x p).
pub fn fit(y: &DMatrix<f64>, x: &DMatrix<f64>, config: &FitConfig) -> Result<FitReport> {
    let (n, q) = y.shape();
    if q == 0 || x.ncols() == 0 {
        return Err(Error::DimensionMismatch("need at least one response and one covariate".into()));
    }
    if x.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "responses have {n} rows, covariates have {}",
            x.nrows()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("responses"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariates"));
    }
    config.validate(q)?;
    let required = config.interior_knots + 5;
    if n < required.max(2 * config.folds) {
        return Err(Error::TooFewObservations {
            required: required.max(2 * config.folds),
            found: n,
        });
    }

    let design = AdditiveDesign::from_covariates(x, config.interior_knots)?;
    let p = design.p();
    let lambda3 = {
        let drs: Vec<(usize, usize)> = (0..p).flat_map(|j| (0..q).map(move |r| (j, r))).collect();
        let values: Vec<f64> = drs
            .par_iter()
            .map(|&(j, r)| {
                let dr = DRBasis {
                    linear_col: design.linear.column(j).clone_owned(),
                    nonlinear_cols: design.nonlinear[j].clone(),
                    basis: design.bases[j].clone(),
                };
                gcv_lambda3(&y.column(r).clone_owned(), &dr, &config.gcv_grid).value()
            })
            .collect();
        DMatrix::from_row_iterator(p, q, values)
    };
    let plan = FoldPlan::new(n, config.folds, config.seed)?;
    let blocks: Vec<&DMatrix<f64>> = design.nonlinear.iter().collect();
    let groups = GroupDesign::new(&blocks, &plan)?;
    let ws = Workspace {
        y,
        design: &design,
        config,
        plan,
        groups,
    };

    let widths: Vec<usize> = design.nonlinear.iter().map(|b| b.ncols()).collect();
    let mut state = ModelState::initial(y, &widths, lambda3);
    let joint = config.mode == Mode::Compadre && q >= 2;
    let mut mse_trace = Vec::new();
    let mut objective_trace = Vec::new();
    let mut tuning: Vec<IterationTuning> = Vec::new();
    let mut converged = false;

    for iter in 1..=config.max_iters {
        let previous = if config.select_once { tuning.first() } else { None };

        // Steps 1 and 1.5.
        let resid = residuals(&state, y, &design);
        let linear: Vec<LinearStep> = (0..q)
            .into_par_iter()
            .map(|r| {
                ws.linear_step(r, &state, &resid, previous.map(|t| t.responses[r].lambda1))
                    .map_err(|e| e.at(iter, "linear selection", Some(r)))
            })
            .collect::<Result<_>>()?;
        for (r, step) in linear.iter().enumerate() {
            state.intercepts[r] = step.intercept;
            state.beta_lin.set_column(r, &step.coefs);
        }

        // Step 2.
        let resid = residuals(&state, y, &design);
        let guard_p = (iter == 1).then_some(p);
        let nonlinear: Vec<NonlinearStep> = (0..q)
            .into_par_iter()
            .map(|r| {
                ws.nonlinear_step(r, &state, &resid, previous.map(|t| t.responses[r].lambda2), guard_p)
                    .map_err(|e| e.at(iter, "nonlinear selection", Some(r)))
            })
            .collect::<Result<_>>()?;
        for (r, step) in nonlinear.iter().enumerate() {
            state.beta_nl[r] = step.blocks.clone();
        }

        // Step 2.5.
        let resid = residuals(&state, y, &design);
        let refits: Vec<(f64, DVector<f64>, Vec<DVector<f64>>)> = (0..q)
            .into_par_iter()
            .map(|r| {
                ws.refit_step(r, &state, &resid, &linear[r].selected)
                    .map_err(|e| e.at(iter, "mixed model refit", Some(r)))
            })
            .collect::<Result<_>>()?;
        for (r, (b0, coefs, nl)) in refits.into_iter().enumerate() {
            state.intercepts[r] = b0;
            state.beta_lin.set_column(r, &coefs);
            state.beta_nl[r] = nl;
        }

        // Step 3.
        let resid = residuals(&state, y, &design);
        let (lambda4, lambda4_cv) = if joint {
            let (l4, rec) = match (config.lambda4, previous.and_then(|t| t.lambda4)) {
                (PrecisionPenalty::Fixed(l), _) => (l, None),
                (PrecisionPenalty::Cv, Some(l)) => (l, None),
                (PrecisionPenalty::Cv, None) => {
                    let rec = cv_glasso(&resid, &ws.plan, config.path, &config.glasso)
                        .map_err(|e| e.at(iter, "precision", None))?;
                    (rec.chosen_lambda(), Some(rec))
                }
            };
            let s = empirical_covariance(&resid);
            state.precision = graphical_lasso_with(&s, l4, &config.glasso).map_err(|e| e.at(iter, "precision", None))?;
            if !state.precision.converged {
                warn!("graphical lasso stopped with duality gap {:e}", state.precision.duality_gap);
            }
            (Some(l4), rec)
        } else {
            (None, None)
        };

        let penalties = Penalties {
            lambda1: linear.iter().map(|s| s.lambda1).collect(),
            lambda2: nonlinear.iter().map(|s| s.lambda2).collect(),
            lambda4: lambda4.unwrap_or(0.0),
        };
        let mse = conditional_mse(&resid, &state.precision);
        objective_trace.push(objective(&state, y, &design, &penalties)?);
        if let Some(&last) = mse_trace.last() {
            if mse > last {
                warn!("iteration {iter}: mean squared error rose from {last} to {mse}");
            }
        }
        debug!("iteration {iter}: mse {mse}");
        mse_trace.push(mse);
        tuning.push(IterationTuning {
            responses: linear
                .into_iter()
                .zip(nonlinear)
                .map(|(l, nl)| ResponseTuning {
                    lambda1: l.lambda1,
                    lambda2: nl.lambda2,
                    lambda1_cv: l.cv,
                    lambda2_cv: nl.cv,
                    lasso_converged: l.converged,
                    group_converged: nl.converged,
                })
                .collect(),
            lambda4,
            lambda4_cv,
        });
        let k = mse_trace.len();
        if k >= 2 && (mse_trace[k - 1] - mse_trace[k - 2]).abs() < config.tol {
            converged = true;
            break;
        }
    }

    let fitted = state.fitted(&design);
    Ok(FitReport {
        labels: classify(&state),
        fitted,
        mse_trace,
        objective_trace,
        tuning,
        converged,
        bases: design.bases.clone(),
        state,
    })
}

/// Conditional means at new raw covariates from stored bases and state.
pub fn predict_state(bases: &[CovariateBasis], state: &ModelState, x_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if bases.len() != state.num_covariates() {
        return Err(Error::DimensionMismatch("bases and state disagree".into()));
    }
    let design = AdditiveDesign::evaluate(bases, x_new)?;
    Ok(state.fitted(&design))
}

pub fn predict(report: &FitReport, x_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    predict_state(&report.bases, &report.state, x_new)
}
