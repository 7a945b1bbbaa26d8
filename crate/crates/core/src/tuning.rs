//! Penalty paths, K-fold cross-validation and the one-standard-error rule.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{center_columns, log_det_pd, log_spaced_desc, select_entries, select_rows};
use crate::solvers::{
    graphical_lasso_with, lasso_with, CenteredGram, FactorKind, GlassoOptions, GroupLassoProblem,
    GroupedGram, SolverOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    Linear,
    Group,
    Precision,
}

/// Strictly decreasing positive penalty values; the first is `lambda_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaPath {
    values: Vec<f64>,
    kind: PathKind,
}

impl LambdaPath {
    /// `len` log-spaced values from `lambda_max` down to `min_ratio * lambda_max`.
    pub fn log_spaced(lambda_max: f64, len: usize, min_ratio: f64, kind: PathKind) -> Result<Self> {
        if len == 0 || !(min_ratio > 0.0 && min_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "path length {len}, min ratio {min_ratio}"
            )));
        }
        if !(lambda_max > 0.0) || !lambda_max.is_finite() {
            // The null solution holds for every penalty; a single tiny value
            // keeps the path well formed.
            return Ok(Self {
                values: vec![f64::MIN_POSITIVE],
                kind,
            });
        }
        Self::from_values(log_spaced_desc(lambda_max, lambda_max * min_ratio, len), kind)
    }

    pub fn from_values(values: Vec<f64>, kind: PathKind) -> Result<Self> {
        if values.is_empty()
            || values.iter().any(|v| !(*v > 0.0) || !v.is_finite())
            || values.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(Error::InvalidConfig(
                "penalty path must be positive and strictly decreasing".into(),
            ));
        }
        Ok(Self { values, kind })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> PathKind {
        self.kind
    }

    pub fn lambda_max(&self) -> f64 {
        self.values[0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `max_j |X_j' y| / n` on centered columns and response.
pub fn lambda_max_linear(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let (_, xc) = center_columns(x);
    let yc = y.add_scalar(-y.sum() / n);
    xc.column_iter().map(|c| c.dot(&yc).abs() / n).fold(0.0, f64::max)
}

/// Smallest `lambda2` with an all-zero group lasso solution.
pub fn lambda_max_group(problem: &GroupLassoProblem) -> f64 {
    problem.lambda_max()
}

/// With `p >= 100`, keep only values at or above `0.75 * lambda_max` and
/// end the path exactly there.
pub fn guard_lambda2_range(path: &LambdaPath, p: usize) -> LambdaPath {
    if p < 100 {
        return path.clone();
    }
    let floor = 0.75 * path.lambda_max();
    let mut values: Vec<f64> = path.values.iter().cloned().filter(|&v| v >= floor).collect();
    if values.last().is_some_and(|&v| v > floor) {
        values.push(floor);
    }
    LambdaPath {
        values,
        kind: path.kind,
    }
}

/// Fold membership: a seeded permutation cut into `k` contiguous blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    k: usize,
    assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 || n < 2 * k {
            return Err(Error::InvalidConfig(format!("{k} folds for {n} observations")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
        let mut assignment = vec![0; n];
        for (pos, &obs) in order.iter().enumerate() {
            assignment[obs] = pos * k / n;
        }
        Ok(Self { k, assignment })
    }

    pub fn num_folds(&self) -> usize {
        self.k
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }
}

/// Fold assignment as a plain vector of fold ids.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    FoldPlan::new(n, k, seed).map(|p| p.assignment)
}

/// Cross-validation summary along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct CVRecord {
    pub lambdas: Vec<f64>,
    pub mean_error: Vec<f64>,
    pub std_error: Vec<f64>,
    pub chosen: usize,
}

impl CVRecord {
    pub fn chosen_lambda(&self) -> f64 {
        self.lambdas[self.chosen]
    }

    pub fn min_index(&self) -> usize {
        argmin(&self.mean_error)
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &e) in v.iter().enumerate() {
        if e < v[best] {
            best = i;
        }
    }
    best
}

/// Largest-penalty index whose mean error is within one standard error of
/// the minimum. `mean` is ordered by decreasing penalty.
pub fn one_se_rule(mean: &[f64], se: &[f64]) -> usize {
    let best = argmin(mean);
    let bound = mean[best] + se[best];
    mean.iter().position(|&m| m <= bound).unwrap_or(best)
}

/// Run `fold_errors(f)` for every fold (in parallel), each returning one
/// held-out error per path value, and apply the one-standard-error rule.
pub fn cv_select<F>(path: &LambdaPath, plan: &FoldPlan, fold_errors: F) -> Result<CVRecord>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    let k = plan.num_folds();
    let per_fold: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(&fold_errors)
        .collect::<Result<_>>()?;
    let m = path.len();
    if per_fold.iter().any(|e| e.len() != m) {
        return Err(Error::DimensionMismatch(
            "fold errors do not match the path length".into(),
        ));
    }
    let kf = k as f64;
    let mut mean_error = vec![0.0; m];
    let mut std_error = vec![0.0; m];
    for i in 0..m {
        let mu = per_fold.iter().map(|e| e[i]).sum::<f64>() / kf;
        let var = per_fold.iter().map(|e| (e[i] - mu).powi(2)).sum::<f64>() / (kf - 1.0);
        mean_error[i] = mu;
        std_error[i] = (var / kf).sqrt();
    }
    let chosen = one_se_rule(&mean_error, &std_error);
    Ok(CVRecord {
        lambdas: path.values.clone(),
        mean_error,
        std_error,
        chosen,
    })
}

/// Path and fold settings shared by the CV helpers below.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSettings {
    pub len: usize,
    pub min_ratio: f64,
}

impl Default for PathSettings {
    fn default() -> Self {
        Self {
            len: 50,
            min_ratio: 1e-3,
        }
    }
}

fn mse(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared() / a.len() as f64
}

/// Lasso path whose top is null on the full data and on every training fold.
pub fn lasso_path(x: &DMatrix<f64>, y: &DVector<f64>, plan: &FoldPlan, settings: PathSettings) -> Result<LambdaPath> {
    let mut top = lambda_max_linear(x, y);
    for f in 0..plan.num_folds() {
        let rows = plan.train_rows(f);
        top = top.max(lambda_max_linear(&select_rows(x, &rows), &select_entries(y, &rows)));
    }
    LambdaPath::log_spaced(top, settings.len, settings.min_ratio, PathKind::Linear)
}

/// Cross-validated lasso penalty.
pub fn cv_lasso(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    plan: &FoldPlan,
    settings: PathSettings,
    opts: &SolverOptions,
) -> Result<CVRecord> {
    let path = lasso_path(x, y, plan, settings)?;
    cv_select(&path, plan, |f| {
        let (train, test) = (plan.train_rows(f), plan.test_rows(f));
        let (xtr, ytr) = (select_rows(x, &train), select_entries(y, &train));
        let (xte, yte) = (select_rows(x, &test), select_entries(y, &test));
        let mut warm: Option<DVector<f64>> = None;
        let mut errors = Vec::with_capacity(path.len());
        for &lambda in path.values() {
            let fit = lasso_with(&xtr, &ytr, lambda, opts, warm.as_ref())?;
            let pred = (&xte * &fit.coefs).add_scalar(fit.intercept);
            errors.push(mse(&yte, &pred));
            warm = Some(fit.coefs);
        }
        Ok(errors)
    })
}

/// Stacked nonlinear blocks with centered Grams precomputed for the full
/// data and for each training fold.
#[derive(Debug, Clone)]
pub struct GroupDesign {
    u: DMatrix<f64>,
    full: Arc<CenteredGram>,
    train: Vec<Arc<CenteredGram>>,
    plan: FoldPlan,
}

impl GroupDesign {
    pub fn new(blocks: &[&DMatrix<f64>], plan: &FoldPlan) -> Result<Self> {
        let n = plan.assignment.len();
        if blocks.iter().any(|b| b.nrows() != n) {
            return Err(Error::DimensionMismatch("block rows differ from fold plan".into()));
        }
        let sizes: Vec<usize> = blocks.iter().map(|b| b.ncols()).collect();
        let total = sizes.iter().sum();
        let mut u = DMatrix::zeros(n, total);
        let mut off = 0;
        for b in blocks {
            u.view_mut((0, off), (n, b.ncols())).copy_from(*b);
            off += b.ncols();
        }
        let sums = |m: &DMatrix<f64>| DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()));
        let utu = u.tr_mul(&u);
        let sum_u = sums(&u);
        let full = Arc::new(CenteredGram::from_raw(n, sizes.clone(), &utu, &sum_u));
        let train = (0..plan.num_folds())
            .into_par_iter()
            .map(|f| {
                let test = select_rows(&u, &plan.test_rows(f));
                Arc::new(CenteredGram::from_raw(
                    n - test.nrows(),
                    sizes.clone(),
                    &(&utu - test.tr_mul(&test)),
                    &(&sum_u - sums(&test)),
                ))
            })
            .collect();
        Ok(Self {
            u,
            full,
            train,
            plan: plan.clone(),
        })
    }

    pub fn num_groups(&self) -> usize {
        self.full.sizes.len()
    }

    pub fn plan(&self) -> &FoldPlan {
        &self.plan
    }

    /// Centered Gram for `y` on the full data (`None`) or a training fold.
    pub fn gram(&self, fold: Option<usize>, y: &DVector<f64>) -> GroupedGram {
        match fold {
            None => GroupedGram::new(Arc::clone(&self.full), &self.u.tr_mul(y), y.sum()),
            Some(f) => {
                let rows = self.plan.train_rows(f);
                let ut = select_rows(&self.u, &rows);
                let yt = select_entries(y, &rows);
                GroupedGram::new(Arc::clone(&self.train[f]), &ut.tr_mul(&yt), yt.sum())
            }
        }
    }

    /// Held-out design rows for a fold.
    fn test_design(&self, fold: usize) -> DMatrix<f64> {
        select_rows(&self.u, &self.plan.test_rows(fold))
    }
}

/// Cross-validated group lasso penalty. `lambda3[j]` is the metric weight
/// of each block's smoothness penalty. `guard_p` applies the
/// high-dimensional range guard for that covariate count.
#[allow(clippy::too_many_arguments)]
pub fn cv_group_lasso(
    design: &GroupDesign,
    gammas: &[&DVector<f64>],
    lambda3: &[f64],
    y: &DVector<f64>,
    settings: PathSettings,
    guard_p: Option<usize>,
    opts: &SolverOptions,
    kind: FactorKind,
) -> Result<(CVRecord, GroupLassoProblem)> {
    let full = GroupLassoProblem::new(&design.gram(None, y), gammas, lambda3, kind)?;
    let folds: Vec<GroupLassoProblem> = (0..design.plan.num_folds())
        .map(|f| GroupLassoProblem::new(&design.gram(Some(f), y), gammas, lambda3, kind))
        .collect::<Result<_>>()?;
    let top = folds
        .iter()
        .map(|p| p.lambda_max())
        .fold(full.lambda_max(), f64::max);
    let mut path = LambdaPath::log_spaced(top, settings.len, settings.min_ratio, PathKind::Group)?;
    if let Some(p) = guard_p {
        path = guard_lambda2_range(&path, p);
    }
    let record = cv_select(&path, &design.plan, |f| {
        let problem = &folds[f];
        let test = design.plan.test_rows(f);
        let ute = design.test_design(f);
        let yte = select_entries(y, &test);
        let mut warm: Option<Vec<DVector<f64>>> = None;
        let mut errors = Vec::with_capacity(path.len());
        for &lambda in path.values() {
            let sol = problem.solve(lambda, warm.as_deref(), opts);
            let fit = problem.to_fit(&sol);
            let coef = stack(&fit.blocks);
            let pred = (&ute * coef).add_scalar(fit.intercept);
            errors.push(mse(&yte, &pred));
            warm = Some(sol.theta);
        }
        Ok(errors)
    })?;
    Ok((record, full))
}

fn stack(blocks: &[DVector<f64>]) -> DVector<f64> {
    let total = blocks.iter().map(|b| b.len()).sum();
    DVector::from_iterator(total, blocks.iter().flat_map(|b| b.iter().cloned()))
}

/// Covariance of the rows of `e` around `center`, denominator `n`.
pub fn covariance_about(e: &DMatrix<f64>, center: &DVector<f64>) -> DMatrix<f64> {
    let mut c = e.clone();
    for mut row in c.row_iter_mut() {
        row -= center.transpose();
    }
    c.tr_mul(&c) / e.nrows() as f64
}

/// Maximum likelihood covariance (column-centered, denominator `n`).
pub fn empirical_covariance(e: &DMatrix<f64>) -> DMatrix<f64> {
    let (means, _) = center_columns(e);
    covariance_about(e, &means)
}

fn max_off_diagonal(s: &DMatrix<f64>) -> f64 {
    let q = s.nrows();
    let mut m = 0.0f64;
    for a in 0..q {
        for b in 0..q {
            if a != b {
                m = m.max(s[(a, b)].abs());
            }
        }
    }
    m
}

/// Cross-validated graphical lasso penalty on a residual matrix; the
/// held-out loss is the Gaussian negative log-likelihood
/// `tr(S_test P) - log det P`.
pub fn cv_glasso(
    e: &DMatrix<f64>,
    plan: &FoldPlan,
    settings: PathSettings,
    opts: &GlassoOptions,
) -> Result<CVRecord> {
    let mut top = max_off_diagonal(&empirical_covariance(e));
    for f in 0..plan.num_folds() {
        top = top.max(max_off_diagonal(&empirical_covariance(&select_rows(e, &plan.train_rows(f)))));
    }
    let path = LambdaPath::log_spaced(top, settings.len, settings.min_ratio, PathKind::Precision)?;
    cv_select(&path, plan, |f| {
        let train = select_rows(e, &plan.train_rows(f));
        let test = select_rows(e, &plan.test_rows(f));
        let (means, _) = center_columns(&train);
        let s_train = covariance_about(&train, &means);
        let s_test = covariance_about(&test, &means);
        path.values()
            .iter()
            .map(|&lambda| {
                let est = graphical_lasso_with(&s_train, lambda, opts)?;
                let ld = log_det_pd(&est.precision).ok_or(Error::NonPdPrecision)?;
                Ok(s_test.component_mul(&est.precision).sum() - ld)
            })
            .collect()
    })
}
