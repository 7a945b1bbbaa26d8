use nalgebra::{DMatrix, DVector};

use super::group_lasso::SmoothBlock;
use super::ols::{independent_columns, ols_refit};
use crate::error::{Error, Result};
use crate::linalg::select_columns;

/// Fixed (linear) and random (nonlinear) effects at a fixed variance ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedModelFit {
    /// One coefficient per fixed-effect column; dropped columns get zero.
    pub linear_coefs: DVector<f64>,
    pub nonlinear_coefs: Vec<DVector<f64>>,
    /// `RSS / (n - edf)`.
    pub noise_var: f64,
    /// Trace of the smoother matrix.
    pub edf: f64,
    pub dropped: Vec<usize>,
}

/// Minimizes `||y - X a - sum_j U_j b_j||^2 + sum_j lambda3_j b_j' Gamma_j b_j`.
///
/// `x_sel` carries every fixed effect, including a constant column when an
/// intercept is wanted. Collinear fixed columns are dropped.
pub fn mixed_model_refit(
    x_sel: &DMatrix<f64>,
    blocks: &[SmoothBlock<'_>],
    y: &DVector<f64>,
) -> Result<MixedModelFit> {
    let n = y.len();
    if x_sel.nrows() != n || blocks.iter().any(|b| b.design.nrows() != n) {
        return Err(Error::DimensionMismatch(format!(
            "designs must have {n} rows"
        )));
    }
    for b in blocks {
        if b.gamma.len() != b.design.ncols() {
            return Err(Error::DimensionMismatch(
                "penalty length differs from block width".into(),
            ));
        }
        if !(b.lambda3 >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda3 = {}", b.lambda3)));
        }
    }

    if blocks.is_empty() {
        let fit = ols_refit(x_sel, y)?;
        let resid = y - x_sel * &fit.coefs;
        let edf = (x_sel.ncols() - fit.dropped.len()) as f64;
        return Ok(MixedModelFit {
            noise_var: noise_var(resid.norm_squared(), n, edf)?,
            linear_coefs: fit.coefs,
            nonlinear_coefs: Vec::new(),
            edf,
            dropped: fit.dropped,
        });
    }

    let (kept, dropped) = independent_columns(x_sel);
    let xk = select_columns(x_sel, &kept);
    let widths: Vec<usize> = blocks.iter().map(|b| b.design.ncols()).collect();
    let m = kept.len() + widths.iter().sum::<usize>();
    let mut a = DMatrix::zeros(n, m);
    a.view_mut((0, 0), (n, kept.len())).copy_from(&xk);
    let mut stacked = DMatrix::zeros(n + m, m);
    let mut off = kept.len();
    for b in blocks {
        let d = b.design.ncols();
        a.view_mut((0, off), (n, d)).copy_from(b.design);
        for i in 0..d {
            stacked[(n + off + i, off + i)] = (b.lambda3 * b.gamma[i]).sqrt();
        }
        off += d;
    }
    stacked.view_mut((0, 0), (n, m)).copy_from(&a);
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(y);

    let qr = stacked.qr();
    let r = qr.r();
    let rdiag = r.diagonal().abs();
    let ratio = rdiag.min() / rdiag.max();
    if !(ratio > 1e-12) {
        return Err(Error::RankDeficient { ratio });
    }
    let qty = qr.q().tr_mul(&rhs);
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficient { ratio })?;

    let rinv = r
        .solve_upper_triangular(&DMatrix::identity(m, m))
        .ok_or(Error::RankDeficient { ratio })?;
    let edf = (&a * rinv).norm_squared();
    let resid = y - &a * &coef;

    let mut linear_coefs = DVector::zeros(x_sel.ncols());
    for (i, &j) in kept.iter().enumerate() {
        linear_coefs[j] = coef[i];
    }
    let mut nonlinear_coefs = Vec::with_capacity(blocks.len());
    let mut off = kept.len();
    for d in widths {
        nonlinear_coefs.push(coef.rows(off, d).clone_owned());
        off += d;
    }
    Ok(MixedModelFit {
        linear_coefs,
        nonlinear_coefs,
        noise_var: noise_var(resid.norm_squared(), n, edf)?,
        edf,
        dropped,
    })
}

fn noise_var(rss: f64, n: usize, edf: f64) -> Result<f64> {
    let dof = n as f64 - edf;
    if !(dof > 0.0) {
        return Err(Error::TooFewObservations {
            required: edf.ceil() as usize + 1,
            found: n,
        });
    }
    Ok(rss / dof)
}
