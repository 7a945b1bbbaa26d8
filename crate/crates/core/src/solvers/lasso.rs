use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{center_columns, soft_threshold};

/// Stopping rule shared by the coordinate-descent solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Tolerance on the stationarity (KKT) measure.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl SolverOptions {
    pub fn lasso() -> Self {
        Self {
            tol: 1e-6,
            max_sweeps: 10_000,
        }
    }

    pub fn group_lasso() -> Self {
        Self {
            tol: 1e-6,
            max_sweeps: 5_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub coefs: DVector<f64>,
    pub intercept: f64,
    pub lambda1: f64,
    pub active_set: Vec<usize>,
    /// False when `max_sweeps` ran out; the last (lowest objective) iterate is kept.
    pub converged: bool,
    pub sweeps: usize,
}

/// Lasso with an unpenalized intercept at the default tolerances.
pub fn lasso(x: &DMatrix<f64>, y: &DVector<f64>, lambda1: f64) -> Result<LassoFit> {
    lasso_with(x, y, lambda1, &SolverOptions::lasso(), None)
}

/// Minimizes `(1/2n) ||y - b0 - X b||^2 + lambda1 ||b||_1` by cyclic
/// coordinate descent, stopping once every coordinate satisfies its KKT
/// condition within `opts.tol`.
pub fn lasso_with(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda1: f64,
    opts: &SolverOptions,
    warm: Option<&DVector<f64>>,
) -> Result<LassoFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "design has {n} rows, response has {}",
            y.len()
        )));
    }
    if !(lambda1 >= 0.0) || !lambda1.is_finite() {
        return Err(Error::InvalidConfig(format!("lambda1 = {lambda1}")));
    }
    let nf = n as f64;
    let (x_means, xc) = center_columns(x);
    let y_mean = y.sum() / nf;
    let yc = y.add_scalar(-y_mean);
    let scale: Vec<f64> = xc.column_iter().map(|c| c.norm_squared() / nf).collect();

    let mut beta = match warm {
        Some(w) if w.len() == p => w.clone(),
        _ => DVector::zeros(p),
    };
    let mut resid = &yc - &xc * &beta;

    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        for j in 0..p {
            if scale[j] == 0.0 {
                beta[j] = 0.0;
                continue;
            }
            let col = xc.column(j);
            let old = beta[j];
            let z = col.dot(&resid) / nf + scale[j] * old;
            let new = soft_threshold(z, lambda1) / scale[j];
            if new != old {
                resid.axpy(old - new, &col, 1.0);
                beta[j] = new;
            }
        }
        if kkt_violation(&xc, &resid, &beta, lambda1) <= opts.tol {
            converged = true;
            break;
        }
    }

    let intercept = y_mean - x_means.dot(&beta);
    let active_set = (0..p).filter(|&j| beta[j] != 0.0).collect();
    Ok(LassoFit {
        coefs: beta,
        intercept,
        lambda1,
        active_set,
        converged,
        sweeps,
    })
}

/// Largest KKT violation of a lasso iterate on centered data.
fn kkt_violation(xc: &DMatrix<f64>, resid: &DVector<f64>, beta: &DVector<f64>, lambda: f64) -> f64 {
    let nf = xc.nrows() as f64;
    let mut worst = 0.0f64;
    for (j, col) in xc.column_iter().enumerate() {
        let g = col.dot(resid) / nf;
        let v = if beta[j] != 0.0 {
            (g - lambda * beta[j].signum()).abs()
        } else {
            (g.abs() - lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// `(1/2n) ||y - b0 - X b||^2 + lambda1 ||b||_1`.
pub fn lasso_objective(x: &DMatrix<f64>, y: &DVector<f64>, fit: &LassoFit) -> f64 {
    let n = y.len() as f64;
    let r = y - x * &fit.coefs;
    let r = r.add_scalar(-fit.intercept);
    r.norm_squared() / (2.0 * n) + fit.lambda1 * fit.coefs.iter().map(|b| b.abs()).sum::<f64>()
}
