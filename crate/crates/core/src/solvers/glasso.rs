//! Graphical lasso with an off-diagonal penalty.
//!
//! Maximizes `log det P - tr(S P) - lambda4 sum_{a != b} |P_ab|` by cycling
//! over columns of the working covariance `W ~ P^-1`, each update being a
//! lasso in the column's coefficients. The diagonal of `W` is fixed at the
//! diagonal of `S`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{inverse_pd, log_det_pd, min_eigenvalue, soft_threshold};

/// Ridge added to a singular covariance when no penalty is applied.
pub const SINGULAR_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlassoOptions {
    /// Bound on the duality gap.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Tolerance of the inner lasso on each column.
    pub inner_tol: f64,
}

impl Default for GlassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_sweeps: 1_000,
            inner_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionEstimate {
    pub precision: DMatrix<f64>,
    pub lambda4: f64,
    /// Ridge added to the diagonal of `S`, if any.
    pub jitter: Option<f64>,
    pub converged: bool,
    pub duality_gap: f64,
}

impl PrecisionEstimate {
    pub fn identity(q: usize) -> Self {
        Self {
            precision: DMatrix::identity(q, q),
            lambda4: 0.0,
            jitter: None,
            converged: true,
            duality_gap: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.precision.nrows()
    }

    pub fn is_identity(&self) -> bool {
        let q = self.dim();
        (0..q).all(|a| (0..q).all(|b| self.precision[(a, b)] == if a == b { 1.0 } else { 0.0 }))
    }
}

pub fn graphical_lasso(s: &DMatrix<f64>, lambda4: f64) -> Result<PrecisionEstimate> {
    graphical_lasso_with(s, lambda4, &GlassoOptions::default())
}

pub fn graphical_lasso_with(
    s: &DMatrix<f64>,
    lambda4: f64,
    opts: &GlassoOptions,
) -> Result<PrecisionEstimate> {
    let q = s.nrows();
    if s.ncols() != q || q == 0 {
        return Err(Error::DimensionMismatch(format!(
            "covariance is {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("empirical covariance"));
    }
    if !(lambda4 >= 0.0) || !lambda4.is_finite() {
        return Err(Error::InvalidConfig(format!("lambda4 = {lambda4}")));
    }
    let mut s = (s + s.transpose()) * 0.5;
    let min_eig = min_eigenvalue(&s);
    if min_eig < -1e-8 {
        return Err(Error::NonPsdInput {
            min_eigenvalue: min_eig,
        });
    }
    let max_diag = s.diagonal().max();
    let singular = min_eig <= 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    let mut jitter = None;
    if (lambda4 == 0.0 && singular) || s.diagonal().iter().any(|&d| d <= 0.0) {
        for i in 0..q {
            s[(i, i)] += SINGULAR_JITTER;
        }
        jitter = Some(SINGULAR_JITTER);
    }

    if q == 1 {
        return Ok(PrecisionEstimate {
            precision: DMatrix::from_element(1, 1, 1.0 / s[(0, 0)]),
            lambda4,
            jitter,
            converged: true,
            duality_gap: 0.0,
        });
    }

    // Start from a dual feasible point: off-diagonals shrunk toward zero
    // just enough to sit within lambda4 of S. Each column update then
    // maximizes log det W over a box containing the current column, so W
    // stays positive definite.
    let max_off = (0..q)
        .flat_map(|a| (0..q).filter(move |&b| b != a).map(move |b| (a, b)))
        .map(|(a, b)| s[(a, b)].abs())
        .fold(0.0f64, f64::max);
    let shrink = if max_off > 0.0 { (lambda4 / max_off).min(1.0) } else { 1.0 };
    let mut w = DMatrix::from_fn(q, q, |a, b| if a == b { s[(a, a)] } else { (1.0 - shrink) * s[(a, b)] });
    let mut betas: Vec<DVector<f64>> = vec![DVector::zeros(q - 1); q];
    let mut converged = false;
    let mut gap = f64::INFINITY;
    for _ in 0..opts.max_sweeps {
        let mut change = 0.0f64;
        for j in 0..q {
            let others: Vec<usize> = (0..q).filter(|&i| i != j).collect();
            let w11 = DMatrix::from_fn(q - 1, q - 1, |a, b| w[(others[a], others[b])]);
            let s12 = DVector::from_fn(q - 1, |a, _| s[(others[a], j)]);
            let beta = &mut betas[j];
            column_lasso(&w11, &s12, lambda4, beta, opts.inner_tol);
            let w12 = &w11 * &*beta;
            for (a, &i) in others.iter().enumerate() {
                change = change.max((w[(i, j)] - w12[a]).abs());
                w[(i, j)] = w12[a];
                w[(j, i)] = w12[a];
            }
        }
        // Each entry of W stays within lambda4 of S, so W is dual feasible
        // and the gap below bounds suboptimality. A quiet sweep also means
        // every column's coefficients were computed against the final W.
        if let Some(theta) = inverse_pd(&w) {
            gap = duality_gap(&s, &theta, lambda4);
            if gap.abs() < opts.tol && change < opts.tol {
                converged = true;
                break;
            }
        }
    }

    let precision = precision_from_betas(&w, &betas)
        .filter(|p| min_eigenvalue(p) > 0.0)
        .or_else(|| inverse_pd(&w).map(|p| (&p + p.transpose()) * 0.5))
        .ok_or(Error::NonPdPrecision)?;
    Ok(PrecisionEstimate {
        precision,
        lambda4,
        jitter,
        converged,
        duality_gap: gap,
    })
}

/// Coordinate descent on `0.5 b'W b - s'b + lambda ||b||_1`.
fn column_lasso(w: &DMatrix<f64>, s: &DVector<f64>, lambda: f64, beta: &mut DVector<f64>, tol: f64) {
    let m = s.len();
    for _ in 0..10_000 {
        let mut delta = 0.0f64;
        for k in 0..m {
            let partial = s[k] - w.row(k).transpose().dot(beta) + w[(k, k)] * beta[k];
            let new = soft_threshold(partial, lambda) / w[(k, k)];
            delta = delta.max((new - beta[k]).abs());
            beta[k] = new;
        }
        if delta < tol {
            break;
        }
    }
}

/// `tr(S P) - Q + lambda ||P||_off` for `P = W^-1`.
fn duality_gap(s: &DMatrix<f64>, theta: &DMatrix<f64>, lambda: f64) -> f64 {
    let q = s.nrows();
    let trace = s.component_mul(theta).sum();
    let mut off = 0.0;
    for a in 0..q {
        for b in 0..q {
            if a != b {
                off += theta[(a, b)].abs();
            }
        }
    }
    trace - q as f64 + lambda * off
}

/// Precision from the column regressions, with exact zeros preserved and
/// the two estimates of each off-diagonal entry averaged.
fn precision_from_betas(w: &DMatrix<f64>, betas: &[DVector<f64>]) -> Option<DMatrix<f64>> {
    let q = w.nrows();
    let mut raw = DMatrix::zeros(q, q);
    for j in 0..q {
        let others: Vec<usize> = (0..q).filter(|&i| i != j).collect();
        let w12 = DVector::from_fn(q - 1, |a, _| w[(others[a], j)]);
        let denom = w[(j, j)] - w12.dot(&betas[j]);
        if !(denom > 0.0) {
            return None;
        }
        let theta_jj = 1.0 / denom;
        raw[(j, j)] = theta_jj;
        for (a, &i) in others.iter().enumerate() {
            raw[(i, j)] = -betas[j][a] * theta_jj;
        }
    }
    let mut p = raw.clone();
    for a in 0..q {
        for b in (a + 1)..q {
            let v = if raw[(a, b)] == 0.0 || raw[(b, a)] == 0.0 {
                0.0
            } else {
                0.5 * (raw[(a, b)] + raw[(b, a)])
            };
            p[(a, b)] = v;
            p[(b, a)] = v;
        }
    }
    Some(p)
}

/// Penalized negative log-likelihood `tr(S P) - log det P + lambda ||P||_off`.
pub fn glasso_objective(s: &DMatrix<f64>, precision: &DMatrix<f64>, lambda4: f64) -> Result<f64> {
    let ld = log_det_pd(precision).ok_or(Error::NonPdPrecision)?;
    Ok(duality_gap(s, precision, lambda4) + s.nrows() as f64 - ld)
}

/// Partial regression coefficients `alpha_q = -P[-q, q] / P[q, q]` and `P[q, q]`.
pub fn alpha_from_precision(prec: &PrecisionEstimate, q: usize) -> (DVector<f64>, f64) {
    let p = &prec.precision;
    let dim = p.nrows();
    let sigma_qq = p[(q, q)];
    let alpha = DVector::from_iterator(
        dim - 1,
        (0..dim).filter(|&i| i != q).map(|i| -p[(i, q)] / sigma_qq),
    );
    (alpha, sigma_qq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_cov(q: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut x = x;
        for i in 1..n {
            for j in 1..q {
                x[(i, j)] += 0.6 * x[(i, j - 1)];
            }
        }
        let (_, xc) = crate::linalg::center_columns(&x);
        xc.tr_mul(&xc) / n as f64
    }

    #[test]
    fn unpenalized_is_inverse() {
        let s = random_cov(4, 200, 1);
        let est = graphical_lasso(&s, 0.0).unwrap();
        let inv = s.clone().try_inverse().unwrap();
        assert!((est.precision - inv).abs().max() < 1e-6);
        assert!(est.jitter.is_none());
    }

    #[test]
    fn two_by_two_closed_form() {
        let s = DMatrix::from_row_slice(2, 2, &[1.5, 0.6, 0.6, 0.9]);
        for &lambda in &[0.0, 0.1, 0.35, 0.59, 0.7] {
            let est = graphical_lasso(&s, lambda).unwrap();
            let cov = est.precision.clone().try_inverse().unwrap();
            assert_abs_diff_eq!(cov[(0, 1)], soft_threshold(0.6, lambda), epsilon = 1e-6);
            assert_abs_diff_eq!(cov[(0, 0)], 1.5, epsilon = 1e-6);
            assert_abs_diff_eq!(cov[(1, 1)], 0.9, epsilon = 1e-6);
        }
    }

    #[test]
    fn full_shrinkage_is_diagonal() {
        let s = random_cov(5, 100, 2);
        let mut max_off = 0.0f64;
        for a in 0..5 {
            for b in 0..5 {
                if a != b {
                    max_off = max_off.max(s[(a, b)].abs());
                }
            }
        }
        let est = graphical_lasso(&s, max_off).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let expect = if a == b { 1.0 / s[(a, a)] } else { 0.0 };
                assert_abs_diff_eq!(est.precision[(a, b)], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn output_symmetric_pd_with_symmetric_pattern() {
        for seed in 0..5 {
            let s = random_cov(6, 40, 10 + seed);
            for &lambda in &[0.0, 0.01, 0.05, 0.2] {
                let est = graphical_lasso(&s, lambda).unwrap();
                let p = &est.precision;
                assert!(crate::linalg::max_abs_asymmetry(p) <= 1e-10);
                assert!(min_eigenvalue(p) > 0.0);
                for a in 0..6 {
                    assert!(p[(a, a)] > 0.0);
                    for b in 0..6 {
                        assert_eq!(p[(a, b)] == 0.0, p[(b, a)] == 0.0);
                    }
                }
                assert!(est.converged, "seed {seed} lambda {lambda}");
            }
        }
    }

    #[test]
    fn penalized_solution_beats_perturbations() {
        let s = random_cov(4, 80, 3);
        let lambda = 0.05;
        let est = graphical_lasso(&s, lambda).unwrap();
        let best = glasso_objective(&s, &est.precision, lambda).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let mut e = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1e-3..1e-3));
            e = &e + e.transpose();
            let candidate = &est.precision + e;
            if let Ok(v) = glasso_objective(&s, &candidate, lambda) {
                assert!(v >= best - 1e-9);
            }
        }
    }

    #[test]
    fn strongly_correlated_input_stays_pd() {
        let s = DMatrix::from_fn(10, 10, |a, b| 0.9f64.powi((a as i32 - b as i32).abs()));
        for &lambda in &[0.01, 0.05, 0.15, 0.5] {
            let est = graphical_lasso(&s, lambda).unwrap();
            assert!(est.converged, "lambda {lambda}");
            assert!(min_eigenvalue(&est.precision) > 0.0);
            let cov = est.precision.clone().try_inverse().unwrap();
            for a in 0..10 {
                assert_abs_diff_eq!(cov[(a, a)], 1.0, epsilon = 1e-5);
                for b in 0..10 {
                    if a != b {
                        assert!((cov[(a, b)] - s[(a, b)]).abs() <= lambda + 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_indefinite_input() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            graphical_lasso(&s, 0.1),
            Err(Error::NonPsdInput { .. })
        ));
    }

    #[test]
    fn singular_unpenalized_input_is_jittered() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let est = graphical_lasso(&s, 0.0).unwrap();
        assert_eq!(est.jitter, Some(SINGULAR_JITTER));
        assert!(min_eigenvalue(&est.precision) > 0.0);
    }

    #[test]
    fn alpha_identity_and_hand_case() {
        let (alpha, sqq) = alpha_from_precision(&PrecisionEstimate::identity(3), 1);
        assert_eq!(alpha, DVector::zeros(2));
        assert_eq!(sqq, 1.0);
        let mut est = PrecisionEstimate::identity(2);
        est.precision = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]);
        let (alpha, sqq) = alpha_from_precision(&est, 0);
        assert_eq!(alpha[0], 0.5);
        assert_eq!(sqq, 2.0);
    }

    #[test]
    fn alpha_gives_conditional_residual_variance() {
        let p = DMatrix::from_row_slice(3, 3, &[2.0, -0.6, 0.3, -0.6, 1.5, -0.4, 0.3, -0.4, 1.2]);
        let cov = p.clone().try_inverse().unwrap();
        let l = cov.cholesky().unwrap().l();
        let mut est = PrecisionEstimate::identity(3);
        est.precision = p.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 100_000;
        for q in 0..3 {
            let (alpha, sqq) = alpha_from_precision(&est, q);
            let mut sum_sq = 0.0;
            for _ in 0..draws {
                let z = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
                let e = &l * z;
                let rest = DVector::from_iterator(2, (0..3).filter(|&i| i != q).map(|i| e[i]));
                let r = e[q] - rest.dot(&alpha);
                sum_sq += r * r;
            }
            let var = sum_sq / draws as f64;
            assert!((var * sqq - 1.0).abs() < 0.02, "q={q} var={var}");
        }
    }
}
