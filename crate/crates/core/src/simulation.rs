//! Synthetic benchmark: sparse additive truths with correlated errors,
//! and selection and estimation scores for the fitted models.
//!
//! Every replicate draws from its own ChaCha20 stream (`seed`, stream =
//! replicate index), so results do not depend on scheduling or platform.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{fit, Effect, EffectLabels, FitConfig, Mode};
use crate::solvers::{lasso_with, ols_refit};
use crate::spline_basis::standardize;
use crate::tuning::{cv_lasso, FoldPlan};

/// Shapes of the true covariate effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrueFunction {
    /// `1 - exp(-2x)`
    F1,
    /// `x^2`
    F2,
    /// `x^3`
    F3,
    /// Gaussian bump with standard deviation 0.1.
    F4,
    /// `x`
    F5,
}

const BUMP_SD: f64 = 0.1;

impl TrueFunction {
    pub const ALL: [TrueFunction; 5] = [
        TrueFunction::F1,
        TrueFunction::F2,
        TrueFunction::F3,
        TrueFunction::F4,
        TrueFunction::F5,
    ];

    pub fn eval(self, delta: f64, x: f64) -> f64 {
        let shape = match self {
            TrueFunction::F1 => 1.0 - (-2.0 * x).exp(),
            TrueFunction::F2 => x * x,
            TrueFunction::F3 => x * x * x,
            TrueFunction::F4 => {
                (-(x * x) / (2.0 * BUMP_SD * BUMP_SD)).exp()
                    / ((2.0 * std::f64::consts::PI).sqrt() * BUMP_SD)
            }
            TrueFunction::F5 => x,
        };
        delta * shape
    }

    pub fn name(self) -> &'static str {
        match self {
            TrueFunction::F1 => "f1",
            TrueFunction::F2 => "f2",
            TrueFunction::F3 => "f3",
            TrueFunction::F4 => "f4",
            TrueFunction::F5 => "f5",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }
}

pub fn eval_function(id: TrueFunction, delta: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| id.eval(delta, v)).collect()
}

/// Which (covariate, response) pairs carry which function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrueModel {
    p: usize,
    q: usize,
    assignment: Vec<Option<TrueFunction>>,
    active_responses: Vec<usize>,
}

impl TrueModel {
    pub fn new(p: usize, q: usize, pairs: &[(usize, usize, TrueFunction)]) -> Result<Self> {
        let mut assignment = vec![None; p * q];
        for &(j, r, f) in pairs {
            if j >= p || r >= q {
                return Err(Error::DimensionMismatch(format!("pair ({j}, {r}) outside {p} x {q}")));
            }
            assignment[j * q + r] = Some(f);
        }
        let mut active: Vec<usize> = pairs.iter().map(|&(_, r, _)| r).collect();
        active.sort_unstable();
        active.dedup();
        Ok(Self {
            p,
            q,
            assignment,
            active_responses: active,
        })
    }

    /// Covariate `m` drives response `m` with function `f`, for `m` in 0 and 1.
    pub fn function_specific(p: usize, q: usize, f: TrueFunction) -> Result<Self> {
        Self::new(p, q, &[(0, 0, f), (1, 1, f)])
    }

    pub fn get(&self, j: usize, r: usize) -> Option<TrueFunction> {
        self.assignment[j * self.q + r]
    }

    pub fn active_responses(&self) -> &[usize] {
        &self.active_responses
    }

    pub fn num_covariates(&self) -> usize {
        self.p
    }

    pub fn num_responses(&self) -> usize {
        self.q
    }

    pub fn num_active(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }
}

/// Four of the first five responses each get 1 to 5 distinct covariates;
/// every chosen covariate independently takes `f5` with probability 0.5
/// and each of `f1`..`f4` with probability 0.125.
pub fn sample_true_model<R: Rng + ?Sized>(p: usize, q: usize, rng: &mut R) -> Result<TrueModel> {
    if p < 5 || q < 5 {
        return Err(Error::InvalidConfig(format!("random truth needs p >= 5 and Q >= 5, got {p}, {q}")));
    }
    let mut responses = sample(rng, 5, 4).into_vec();
    responses.sort_unstable();
    let mut pairs = Vec::new();
    for r in responses {
        let count = rng.random_range(1..=5);
        let mut covariates = sample(rng, p, count).into_vec();
        covariates.sort_unstable();
        for j in covariates {
            let u: f64 = rng.random();
            let f = if u < 0.5 {
                TrueFunction::F5
            } else {
                TrueFunction::ALL[((u - 0.5) / 0.125).floor().min(3.0) as usize]
            };
            pairs.push((j, r, f));
        }
    }
    TrueModel::new(p, q, &pairs)
}

/// `rho^|a - b|`.
pub fn toeplitz_cov(q: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(q, q, |a, b| rho.powi((a as i32 - b as i32).abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruthDesign {
    /// Random sparse truth.
    Random,
    /// Two pairs sharing one function.
    FunctionSpecific(TrueFunction),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSetting {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub rho: f64,
    pub delta: f64,
    pub seed: u64,
    pub design: TruthDesign,
}

impl Default for SimSetting {
    fn default() -> Self {
        Self {
            n: 250,
            p: 10,
            q: 10,
            rho: 0.9,
            delta: 1.0,
            seed: 0,
            design: TruthDesign::Random,
        }
    }
}

impl SimSetting {
    pub fn validate(&self) -> Result<()> {
        self.validate_scalars()?;
        match self.design {
            TruthDesign::Random if self.p < 5 || self.q < 5 => Err(Error::InvalidConfig(
                "random truth needs p >= 5 and Q >= 5".into(),
            )),
            TruthDesign::FunctionSpecific(_) if self.p < 2 || self.q < 2 => Err(Error::InvalidConfig(
                "function-specific truth needs p >= 2 and Q >= 2".into(),
            )),
            _ => Ok(()),
        }
    }

    fn validate_scalars(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig(format!("rho = {} not in [0, 1)", self.rho)));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidConfig(format!("delta = {}", self.delta)));
        }
        if self.n < 2 || self.p == 0 || self.q == 0 {
            return Err(Error::InvalidConfig(format!("n = {}, p = {}, Q = {}", self.n, self.p, self.q)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub truth: TrueModel,
    /// n x Q noiseless signal.
    pub true_f: DMatrix<f64>,
}

fn replicate_rng(setting: &SimSetting, replicate: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(setting.seed);
    rng.set_stream(replicate);
    rng
}

/// Draw replicate `replicate` of a setting.
pub fn simulate_replicate(setting: &SimSetting, replicate: u64) -> Result<SimDataset> {
    setting.validate()?;
    let mut rng = replicate_rng(setting, replicate);
    let truth = match setting.design {
        TruthDesign::Random => sample_true_model(setting.p, setting.q, &mut rng)?,
        TruthDesign::FunctionSpecific(f) => TrueModel::function_specific(setting.p, setting.q, f)?,
    };
    draw(setting, truth, &mut rng)
}

/// Draw covariates and errors for a given truth; `setting.design` is ignored.
pub fn simulate_with_truth(setting: &SimSetting, truth: TrueModel, replicate: u64) -> Result<SimDataset> {
    if truth.num_covariates() != setting.p || truth.num_responses() != setting.q {
        return Err(Error::DimensionMismatch("truth does not match the setting".into()));
    }
    setting.validate_scalars()?;
    draw(setting, truth, &mut replicate_rng(setting, replicate))
}

fn draw(setting: &SimSetting, truth: TrueModel, rng: &mut ChaCha20Rng) -> Result<SimDataset> {
    let SimSetting { n, p, q, rho, delta, .. } = *setting;
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            x[(i, j)] = rng.random_range(-1.0..1.0);
        }
    }
    let chol = toeplitz_cov(q, rho)
        .cholesky()
        .ok_or_else(|| Error::InvalidConfig(format!("rho = {rho} gives a singular covariance")))?;
    let l = chol.l();
    let mut errors = DMatrix::zeros(n, q);
    for i in 0..n {
        let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        errors.set_row(i, &(&l * z).transpose());
    }
    let mut true_f = DMatrix::zeros(n, q);
    for j in 0..p {
        for r in 0..q {
            if let Some(f) = truth.get(j, r) {
                for i in 0..n {
                    true_f[(i, r)] += f.eval(delta, x[(i, j)]);
                }
            }
        }
    }
    Ok(SimDataset {
        y: &true_f + errors,
        x,
        truth,
        true_f,
    })
}

pub fn simulate(setting: &SimSetting) -> Result<SimDataset> {
    simulate_replicate(setting, 0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    /// `None` when the truth has no active pairs.
    pub tpr: Option<f64>,
    /// `None` when every pair is active.
    pub fpr: Option<f64>,
    pub mad: f64,
}

/// Selection rates over (covariate, response) pairs and the mean absolute
/// deviation between the fitted signal and the column-centered true signal.
pub fn score(
    labels: &EffectLabels,
    truth: &TrueModel,
    fitted_f: &DMatrix<f64>,
    true_f: &DMatrix<f64>,
) -> Result<Scores> {
    let (p, q) = (truth.num_covariates(), truth.num_responses());
    if labels.num_covariates() != p
        || labels.num_responses() != q
        || fitted_f.shape() != true_f.shape()
        || true_f.ncols() != q
    {
        return Err(Error::DimensionMismatch("labels, truth and signals disagree".into()));
    }
    let (mut tp, mut pos, mut fp, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for j in 0..p {
        for r in 0..q {
            let selected = labels.get(j, r).is_selected();
            if truth.get(j, r).is_some() {
                pos += 1;
                tp += selected as usize;
            } else {
                neg += 1;
                fp += selected as usize;
            }
        }
    }
    let n = true_f.nrows() as f64;
    let mut total = 0.0;
    for r in 0..q {
        let mean = true_f.column(r).sum() / n;
        for i in 0..true_f.nrows() {
            total += (fitted_f[(i, r)] - (true_f[(i, r)] - mean)).abs();
        }
    }
    Ok(Scores {
        tpr: (pos > 0).then(|| tp as f64 / pos as f64),
        fpr: (neg > 0).then(|| fp as f64 / neg as f64),
        mad: total / true_f.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Compadre,
    Padre,
    /// Per-response lasso on the covariates, then an OLS refit.
    Lasso,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Compadre => "compadre",
            Method::Padre => "padre",
            Method::Lasso => "lasso",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Method::Compadre, Method::Padre, Method::Lasso]
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodFit {
    pub labels: EffectLabels,
    /// n x Q fitted signal without intercepts.
    pub signal: DMatrix<f64>,
}

/// Lasso selection with the one-standard-error rule, then OLS on the
/// selected standardized covariates, separately for every response.
pub fn lasso_baseline(y: &DMatrix<f64>, x: &DMatrix<f64>, config: &FitConfig) -> Result<MethodFit> {
    let (n, q) = y.shape();
    let p = x.ncols();
    let mut z = DMatrix::zeros(n, p);
    for j in 0..p {
        z.set_column(j, &standardize(x.column(j).as_slice())?.values);
    }
    let plan = FoldPlan::new(n, config.folds, config.seed)?;
    let per_response: Vec<(Vec<usize>, DVector<f64>)> = (0..q)
        .into_par_iter()
        .map(|r| {
            let yr = y.column(r).clone_owned();
            let rec = cv_lasso(&z, &yr, &plan, config.path, &config.lasso)?;
            let mut warm: Option<DVector<f64>> = None;
            let mut selected = Vec::new();
            for &l in &rec.lambdas[..=rec.chosen] {
                let fit = lasso_with(&z, &yr, l, &config.lasso, warm.as_ref())?;
                selected = fit.active_set.clone();
                warm = Some(fit.coefs);
            }
            let mut design = DMatrix::from_element(n, selected.len() + 1, 1.0);
            for (c, &j) in selected.iter().enumerate() {
                design.set_column(c + 1, &z.column(j));
            }
            let ols = ols_refit(&design, &yr)?;
            let mut coefs = DVector::zeros(p);
            for (c, &j) in selected.iter().enumerate() {
                coefs[j] = ols.coefs[c + 1];
            }
            Ok((selected, coefs))
        })
        .collect::<Result<_>>()?;
    let mut labels = vec![Effect::Null; p * q];
    let mut signal = DMatrix::zeros(n, q);
    for (r, (selected, coefs)) in per_response.iter().enumerate() {
        for &j in selected {
            if coefs[j] != 0.0 {
                labels[j * q + r] = Effect::Linear;
            }
        }
        signal.set_column(r, &(&z * coefs));
    }
    Ok(MethodFit {
        labels: EffectLabels::new(p, q, labels)?,
        signal,
    })
}

pub fn run_method(method: Method, data: &SimDataset, config: &FitConfig) -> Result<MethodFit> {
    match method {
        Method::Lasso => lasso_baseline(&data.y, &data.x, config),
        Method::Compadre | Method::Padre => {
            let mode = if method == Method::Compadre { Mode::Compadre } else { Mode::Padre };
            let cfg = FitConfig {
                mode,
                ..config.clone()
            };
            let report = fit(&data.y, &data.x, &cfg)?;
            let mut signal = report.fitted.clone();
            for (r, mut col) in signal.column_iter_mut().enumerate() {
                col.add_scalar_mut(-report.state.intercepts[r]);
            }
            Ok(MethodFit {
                labels: report.labels,
                signal,
            })
        }
    }
}

/// One method on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRow {
    pub setting: SimSetting,
    pub replicate: u64,
    pub method: Method,
    pub scores: Scores,
    /// This method's MAD over the marginal method's MAD on the same data.
    pub mad_ratio: Option<f64>,
}

/// Fold seed for a replicate, shared by all methods on that replicate.
fn replicate_fold_seed(seed: u64, replicate: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ replicate.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

pub fn run_replicate(
    setting: &SimSetting,
    replicate: u64,
    methods: &[Method],
    config: &FitConfig,
) -> Result<Vec<ReplicateRow>> {
    let data = simulate_replicate(setting, replicate)?;
    let cfg = FitConfig {
        seed: replicate_fold_seed(setting.seed, replicate),
        ..config.clone()
    };
    let mut rows = Vec::with_capacity(methods.len());
    for &method in methods {
        let fitted = run_method(method, &data, &cfg)?;
        rows.push(ReplicateRow {
            setting: *setting,
            replicate,
            method,
            scores: score(&fitted.labels, &data.truth, &fitted.signal, &data.true_f)?,
            mad_ratio: None,
        });
    }
    if let Some(base) = rows.iter().find(|r| r.method == Method::Padre).map(|r| r.scores.mad) {
        for row in &mut rows {
            row.mad_ratio = Some(row.scores.mad / base);
        }
    }
    Ok(rows)
}

/// Replicates `0..reps`, in parallel, ordered by replicate then method.
pub fn run_campaign(
    setting: &SimSetting,
    reps: u64,
    methods: &[Method],
    config: &FitConfig,
) -> Result<Vec<ReplicateRow>> {
    let per: Vec<Vec<ReplicateRow>> = (0..reps)
        .into_par_iter()
        .map(|rep| run_replicate(setting, rep, methods, config))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Median and interquartile range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub median: f64,
    pub iqr: f64,
    pub count: usize,
}

/// Type-7 quantile of unsorted values.
pub fn quantile(values: &[f64], prob: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    Some(Summary {
        median: quantile(values, 0.5)?,
        iqr: quantile(values, 0.75)? - quantile(values, 0.25)?,
        count: values.len(),
    })
}

/// Per-method summaries of a campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub setting: SimSetting,
    pub method: Method,
    pub replicates: usize,
    pub tpr: Option<Summary>,
    pub fpr: Option<Summary>,
    pub mad: Option<Summary>,
    pub mad_ratio: Option<Summary>,
}

pub fn aggregate(rows: &[ReplicateRow]) -> Vec<AggregateRow> {
    let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
    methods.sort_unstable();
    methods.dedup();
    methods
        .into_iter()
        .map(|m| {
            let mine: Vec<&ReplicateRow> = rows.iter().filter(|r| r.method == m).collect();
            let collect = |f: &dyn Fn(&ReplicateRow) -> Option<f64>| -> Vec<f64> {
                mine.iter().filter_map(|r| f(r)).collect()
            };
            AggregateRow {
                setting: mine[0].setting,
                method: m,
                replicates: mine.len(),
                tpr: summarize(&collect(&|r| r.scores.tpr)),
                fpr: summarize(&collect(&|r| r.scores.fpr)),
                mad: summarize(&collect(&|r| Some(r.scores.mad))),
                mad_ratio: summarize(&collect(&|r| r.mad_ratio)),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::collections::HashMap;

    #[test]
    fn toeplitz_cases() {
        assert_eq!(toeplitz_cov(4, 0.0), DMatrix::identity(4, 4));
        let t = toeplitz_cov(3, 0.5);
        assert_eq!(t, DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0]));
        let t = toeplitz_cov(10, 0.9);
        assert!(crate::linalg::min_eigenvalue(&t) > 0.0);
    }

    #[test]
    fn function_values() {
        assert_eq!(TrueFunction::F1.eval(1.0, 0.0), 0.0);
        assert_eq!(TrueFunction::F5.eval(2.0, 0.5), 1.0);
        assert_abs_diff_eq!(TrueFunction::F4.eval(1.0, 0.0), 3.989_422_804_014_327, epsilon = 1e-12);
        for k in 0..20 {
            let x = -1.0 + 2.0 * k as f64 / 19.0;
            let d = 0.75;
            assert_abs_diff_eq!(TrueFunction::F1.eval(d, x), d * (1.0 - f64::exp(-2.0 * x)), epsilon = 1e-12);
            assert_abs_diff_eq!(TrueFunction::F2.eval(d, x), d * x.powi(2), epsilon = 1e-12);
            assert_abs_diff_eq!(TrueFunction::F3.eval(d, x), d * x.powi(3), epsilon = 1e-12);
            let bump = d / (0.1 * (2.0 * std::f64::consts::PI).sqrt()) * f64::exp(-x * x / 0.02);
            assert_abs_diff_eq!(TrueFunction::F4.eval(d, x), bump, epsilon = 1e-12);
            assert_abs_diff_eq!(TrueFunction::F5.eval(d, x), d * x, epsilon = 1e-12);
        }
    }

    #[test]
    fn truth_structure() {
        for seed in 0..200 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let t = sample_true_model(10, 10, &mut rng).unwrap();
            assert_eq!(t.active_responses().len(), 4);
            assert!(t.active_responses().iter().all(|&r| r < 5));
            for r in 0..10 {
                let count = (0..10).filter(|&j| t.get(j, r).is_some()).count();
                if t.active_responses().contains(&r) {
                    assert!((1..=5).contains(&count));
                } else {
                    assert_eq!(count, 0);
                }
            }
        }
    }

    #[test]
    fn function_frequencies() {
        let mut counts: HashMap<TrueFunction, usize> = HashMap::new();
        let mut sizes = [0usize; 6];
        let mut total = 0;
        for seed in 0..10_000 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let t = sample_true_model(10, 10, &mut rng).unwrap();
            for &r in t.active_responses() {
                let c = (0..10).filter(|&j| t.get(j, r).is_some()).count();
                sizes[c] += 1;
            }
            for j in 0..10 {
                for r in 0..10 {
                    if let Some(f) = t.get(j, r) {
                        *counts.entry(f).or_default() += 1;
                        total += 1;
                    }
                }
            }
        }
        let linear = counts[&TrueFunction::F5] as f64 / total as f64;
        assert!((0.48..=0.52).contains(&linear), "{linear}");
        for f in &TrueFunction::ALL[..4] {
            let share = counts[f] as f64 / total as f64;
            assert!((0.11..=0.14).contains(&share), "{f:?} {share}");
        }
        for &c in &sizes[1..] {
            let share = c as f64 / 40_000.0;
            assert!((0.18..=0.22).contains(&share), "{share}");
        }
    }

    #[test]
    fn simulate_is_deterministic_and_consistent() {
        let s = SimSetting {
            seed: 5,
            delta: 0.5,
            ..SimSetting::default()
        };
        let a = simulate_replicate(&s, 3).unwrap();
        let b = simulate_replicate(&s, 3).unwrap();
        assert_eq!(a, b);
        let c = simulate_replicate(&s, 4).unwrap();
        assert_ne!(a.y, c.y);
        assert!(a.x.iter().all(|&v| (-1.0..1.0).contains(&v)));
        // signal recomputed from the truth
        for r in 0..10 {
            for i in 0..250 {
                let mut f = 0.0;
                for j in 0..10 {
                    if let Some(fun) = a.truth.get(j, r) {
                        f += fun.eval(0.5, a.x[(i, j)]);
                    }
                }
                assert_abs_diff_eq!(a.true_f[(i, r)], f, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn error_covariance_converges_to_toeplitz() {
        let s = SimSetting {
            n: 100_000,
            q: 5,
            rho: 0.7,
            delta: 0.0,
            seed: 1,
            ..SimSetting::default()
        };
        let d = simulate(&s).unwrap();
        assert_eq!(d.true_f, DMatrix::zeros(100_000, 5));
        let cov = crate::tuning::empirical_covariance(&d.y);
        let target = toeplitz_cov(5, 0.7);
        for a in 0..5 {
            for b in 0..5 {
                // sd of a sample covariance is at most sqrt(2 / n)
                let err = (cov[(a, b)] - target[(a, b)]).abs();
                assert!(err < 5.0 * (2.0f64 / 100_000.0).sqrt(), "({a},{b}) {} vs {}", cov[(a, b)], target[(a, b)]);
            }
        }
    }

    #[test]
    fn independent_errors_have_small_correlation() {
        let s = SimSetting {
            rho: 0.0,
            delta: 0.0,
            seed: 2,
            ..SimSetting::default()
        };
        let d = simulate(&s).unwrap();
        let cov = crate::tuning::empirical_covariance(&d.y);
        for a in 0..10 {
            for b in 0..a {
                let r = cov[(a, b)] / (cov[(a, a)] * cov[(b, b)]).sqrt();
                assert!(r.abs() < 0.15);
            }
        }
    }

    fn labels_from(p: usize, q: usize, selected: &[(usize, usize)]) -> EffectLabels {
        let mut v = vec![Effect::Null; p * q];
        for &(j, r) in selected {
            v[j * q + r] = Effect::Linear;
        }
        EffectLabels::new(p, q, v).unwrap()
    }

    #[test]
    fn score_cases() {
        let truth = TrueModel::new(5, 2, &[(0, 0, TrueFunction::F5), (3, 1, TrueFunction::F2)]).unwrap();
        let zero = DMatrix::zeros(4, 2);
        let perfect = score(&labels_from(5, 2, &[(0, 0), (3, 1)]), &truth, &zero, &zero).unwrap();
        assert_eq!((perfect.tpr, perfect.fpr), (Some(1.0), Some(0.0)));
        let none = score(&labels_from(5, 2, &[]), &truth, &zero, &zero).unwrap();
        assert_eq!((none.tpr, none.fpr), (Some(0.0), Some(0.0)));
        let hand = score(&labels_from(5, 2, &[(0, 0), (2, 0)]), &truth, &zero, &zero).unwrap();
        assert_eq!(hand.tpr, Some(0.5));
        assert_eq!(hand.fpr, Some(0.125));
        let empty = TrueModel::new(5, 2, &[]).unwrap();
        assert_eq!(score(&labels_from(5, 2, &[]), &empty, &zero, &zero).unwrap().tpr, None);
    }

    #[test]
    fn mad_uses_centered_truth() {
        let truth = TrueModel::new(1, 1, &[(0, 0, TrueFunction::F5)]).unwrap();
        let true_f = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 6.0]);
        let fitted = DMatrix::from_column_slice(4, 1, &[-2.0, -1.0, 0.0, 3.0]);
        let s = score(&labels_from(1, 1, &[(0, 0)]), &truth, &fitted, &true_f).unwrap();
        assert_eq!(s.mad, 0.0);
    }

    #[test]
    fn quantiles_and_summary() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&v, 0.5), Some(2.5));
        let s = summarize(&v).unwrap();
        assert_abs_diff_eq!(s.iqr, 1.5, epsilon = 1e-15);
        assert!(summarize(&[]).is_none());
    }
}
