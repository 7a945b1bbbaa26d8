use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::select_columns;

/// Relative size below which a column's component orthogonal to the
/// preceding kept columns counts as collinear.
const COLLINEAR_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    /// One coefficient per input column; dropped columns get zero.
    pub coefs: DVector<f64>,
    /// Columns removed as collinear with earlier columns.
    pub dropped: Vec<usize>,
}

/// Indices of columns that are numerically independent of the columns
/// before them (Gram-Schmidt order, two passes of reorthogonalization).
pub(crate) fn independent_columns(x: &DMatrix<f64>) -> (Vec<usize>, Vec<usize>) {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let (mut kept, mut dropped) = (Vec::new(), Vec::new());
    for (j, col) in x.column_iter().enumerate() {
        let norm = col.norm();
        let mut v = col.clone_owned();
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.axpy(-proj, q, 1.0);
            }
        }
        let rnorm = v.norm();
        if norm == 0.0 || rnorm < COLLINEAR_TOL * norm {
            dropped.push(j);
        } else {
            basis.push(v / rnorm);
            kept.push(j);
        }
    }
    (kept, dropped)
}

/// Least squares fit of `y` on the columns of `x` (no intercept is added).
/// Collinear columns are dropped and reported.
pub fn ols_refit(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let (n, s) = x.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "design has {n} rows, response has {}",
            y.len()
        )));
    }
    let (kept, dropped) = independent_columns(x);
    let mut coefs = DVector::zeros(s);
    if !kept.is_empty() {
        if kept.len() > n {
            return Err(Error::DimensionMismatch(format!(
                "{} independent columns exceed {n} rows",
                kept.len()
            )));
        }
        let xk = select_columns(x, &kept);
        let qr = xk.qr();
        let qty = qr.q().tr_mul(y);
        let sol = qr
            .r()
            .solve_upper_triangular(&qty)
            .ok_or(Error::RankDeficient { ratio: 0.0 })?;
        for (i, &j) in kept.iter().enumerate() {
            coefs[j] = sol[i];
        }
    }
    Ok(OlsFit { coefs, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_linear_relation() {
        let z = DMatrix::from_column_slice(5, 1, &[-2.0, -1.0, 0.0, 1.0, 2.0]);
        let y = DVector::from_column_slice(&[-4.0, -2.0, 0.0, 2.0, 4.0]);
        let fit = ols_refit(&z, &y).unwrap();
        assert_abs_diff_eq!(fit.coefs[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn orthogonal_response_gives_zero() {
        let x = DMatrix::from_row_slice(4, 2, &[1., 1., 1., -1., -1., 1., -1., -1.]);
        let y = DVector::from_column_slice(&[1.0, -1.0, -1.0, 1.0]);
        let fit = ols_refit(&x, &y).unwrap();
        assert!(fit.coefs.abs().max() < 1e-10);
    }

    #[test]
    fn matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = DMatrix::from_fn(50, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(50, |_, _| rng.random_range(-2.0..2.0));
        let fit = ols_refit(&x, &y).unwrap();
        let oracle = (x.transpose() * &x).lu().solve(&(x.transpose() * &y)).unwrap();
        assert!((fit.coefs.clone() - oracle).abs().max() < 1e-8);
        let resid = &y - &x * &fit.coefs;
        assert!(x.tr_mul(&resid).abs().max() < 1e-8);
    }

    #[test]
    fn drops_collinear_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
        let c = &a * 2.0 - &b;
        let x = DMatrix::from_columns(&[a.clone(), b.clone(), c]);
        let y = &a * 1.5 + &b * 0.5;
        let fit = ols_refit(&x, &y).unwrap();
        assert_eq!(fit.dropped, vec![2]);
        assert_abs_diff_eq!(fit.coefs[0], 1.5, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.coefs[1], 0.5, epsilon = 1e-10);
        assert_eq!(fit.coefs[2], 0.0);
    }
}
