//! O'Sullivan penalized cubic splines and their Demmler-Reinsch rotation.
//!
//! A covariate is standardized, cubic B-splines are placed on quantile knots,
//! and the exact integrated squared second derivative penalty is computed.
//! The Demmler-Reinsch rotation then diagonalizes that penalty over an
//! orthonormal basis of the fitted space. Its two unpenalized directions span
//! the constant and linear functions; those are dropped (the intercept is
//! global and the linear direction is the standardized covariate itself), and
//! the remaining columns carry the nonlinear part of each covariate effect.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const DEGREE: usize = 3;
const ORDER: usize = DEGREE + 1;

/// Three point Gauss-Legendre rule on [-1, 1]; exact up to degree 5.
const GAUSS_NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
const GAUSS_WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];

/// A centered and scaled covariate.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub values: DVector<f64>,
    pub center: f64,
    pub scale: f64,
}

/// Center by the mean and scale by the sample standard deviation.
pub fn standardize(x: &[f64]) -> Result<Standardized> {
    let n = x.len();
    if n < 2 {
        return Err(Error::TooFewObservations {
            required: 2,
            found: n,
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariate"));
    }
    let center = crate::linalg::mean(x);
    let ss: f64 = x.iter().map(|v| (v - center) * (v - center)).sum();
    let scale = (ss / (n - 1) as f64).sqrt();
    if scale == 0.0 || !scale.is_normal() {
        return Err(Error::ConstantCovariate);
    }
    let values = DVector::from_iterator(n, x.iter().map(|v| (v - center) / scale));
    Ok(Standardized {
        values,
        center,
        scale,
    })
}

/// Interior and boundary knots of a cubic spline.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotSet {
    interior: Vec<f64>,
    boundary: (f64, f64),
}

impl KnotSet {
    pub fn new(interior: Vec<f64>, boundary: (f64, f64)) -> Result<Self> {
        let (lo, hi) = boundary;
        if !lo.is_finite() || !hi.is_finite() || interior.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidKnots("knots must be finite".into()));
        }
        if lo >= hi {
            return Err(Error::InvalidKnots(format!(
                "boundary ({lo}, {hi}) is not increasing"
            )));
        }
        if interior.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidKnots(
                "interior knots must be strictly increasing".into(),
            ));
        }
        if interior.iter().any(|&k| k <= lo || k >= hi) {
            return Err(Error::InvalidKnots(
                "interior knots must lie strictly inside the boundary".into(),
            ));
        }
        Ok(Self { interior, boundary })
    }

    pub fn interior(&self) -> &[f64] {
        &self.interior
    }

    pub fn boundary(&self) -> (f64, f64) {
        self.boundary
    }

    /// Number of cubic B-spline basis functions.
    pub fn num_basis(&self) -> usize {
        self.interior.len() + ORDER
    }

    /// Full knot vector with the boundary knots repeated `ORDER` times.
    fn augmented(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.interior.len() + 2 * ORDER);
        t.extend(std::iter::repeat_n(self.boundary.0, ORDER));
        t.extend_from_slice(&self.interior);
        t.extend(std::iter::repeat_n(self.boundary.1, ORDER));
        t
    }
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Interior knots at the `count` equally spaced quantiles `i/(count+1)`.
pub fn quantile_knots(z: &[f64], count: usize) -> Result<KnotSet> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariate"));
    }
    if z.len() < 2 {
        return Err(Error::TooFewObservations {
            required: 2,
            found: z.len(),
        });
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let mut interior: Vec<f64> = Vec::with_capacity(count);
    for i in 1..=count {
        let k = quantile_sorted(&sorted, i as f64 / (count + 1) as f64);
        if k <= lo || k >= hi {
            continue;
        }
        if interior.last().is_some_and(|&last| k <= last) {
            continue;
        }
        interior.push(k);
    }
    if interior.is_empty() {
        return Err(Error::TooFewDistinctValues { found: 0 });
    }
    KnotSet::new(interior, (lo, hi))
}

/// Knots at the deciles of `z`.
pub fn decile_knots(z: &[f64]) -> Result<KnotSet> {
    quantile_knots(z, 9)
}

/// Index `i` of the knot span with `t[i] <= x < t[i + 1]`; the right
/// boundary belongs to the last non-empty span.
fn find_span(t: &[f64], num_basis: usize, x: f64) -> usize {
    if x >= t[num_basis] {
        return num_basis - 1;
    }
    let mut lo = DEGREE;
    let mut hi = num_basis;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if x < t[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// Values and first two derivatives of the four cubic B-splines that are
/// non-zero on `span`, evaluated at `x` (de Boor / Cox recursion).
fn basis_derivatives(t: &[f64], span: usize, x: f64) -> [[f64; ORDER]; 3] {
    let p = DEGREE;
    let mut ndu = [[0.0f64; ORDER]; ORDER];
    let mut left = [0.0f64; ORDER];
    let mut right = [0.0f64; ORDER];
    ndu[0][0] = 1.0;
    for j in 1..=p {
        left[j] = x - t[span + 1 - j];
        right[j] = t[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }

    let mut ders = [[0.0f64; ORDER]; 3];
    for j in 0..=p {
        ders[0][j] = ndu[j][p];
    }
    let pi = p as isize;
    let mut a = [[0.0f64; ORDER]; 2];
    for r in 0..=pi {
        let (mut s1, mut s2) = (0usize, 1usize);
        a[0][0] = 1.0;
        for k in 1..=2isize {
            let mut d = 0.0;
            let rk = r - k;
            let pk = pi - k;
            if r >= k {
                a[s2][0] = a[s1][0] / ndu[(pk + 1) as usize][rk as usize];
                d = a[s2][0] * ndu[rk as usize][pk as usize];
            }
            let j1 = if rk >= -1 { 1 } else { -rk };
            let j2 = if r - 1 <= pk { k - 1 } else { pi - r };
            for j in j1..=j2 {
                let (ju, rkj) = (j as usize, (rk + j) as usize);
                a[s2][ju] = (a[s1][ju] - a[s1][ju - 1]) / ndu[(pk + 1) as usize][rkj];
                d += a[s2][ju] * ndu[rkj][pk as usize];
            }
            if r <= pk {
                let ku = k as usize;
                a[s2][ku] = -a[s1][ku - 1] / ndu[(pk + 1) as usize][r as usize];
                d += a[s2][ku] * ndu[r as usize][pk as usize];
            }
            ders[k as usize][r as usize] = d;
            std::mem::swap(&mut s1, &mut s2);
        }
    }
    let mut factor = p as f64;
    for (k, row) in ders.iter_mut().enumerate().skip(1) {
        for v in row.iter_mut() {
            *v *= factor;
        }
        factor *= (p - k) as f64;
    }
    ders
}

/// Cubic B-spline design with its exact second-derivative penalty.
#[derive(Debug, Clone)]
pub struct RawSplineBasis {
    /// n x k design, one row per evaluation point.
    pub design: DMatrix<f64>,
    /// k x k penalty with entries integral of phi_a'' phi_b''.
    pub penalty: DMatrix<f64>,
    pub knots: KnotSet,
    /// The points the design was evaluated at.
    pub points: DVector<f64>,
}

/// Evaluate the B-spline design on `z` and integrate the penalty exactly.
pub fn build_osullivan(z: &[f64], knots: &KnotSet) -> Result<RawSplineBasis> {
    let (lo, hi) = knots.boundary();
    if let Some(&value) = z.iter().find(|&&v| !(lo..=hi).contains(&v)) {
        return Err(Error::OutOfRange {
            value,
            lower: lo,
            upper: hi,
        });
    }
    let t = knots.augmented();
    let k = knots.num_basis();
    let mut design = DMatrix::zeros(z.len(), k);
    for (row, &x) in z.iter().enumerate() {
        let span = find_span(&t, k, x);
        let d = basis_derivatives(&t, span, x);
        for (i, v) in d[0].iter().enumerate() {
            design[(row, span - DEGREE + i)] = *v;
        }
    }

    let mut penalty = DMatrix::zeros(k, k);
    for span in DEGREE..k {
        let (a, b) = (t[span], t[span + 1]);
        if b <= a {
            continue;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (node, weight) in GAUSS_NODES.iter().zip(GAUSS_WEIGHTS) {
            let x = mid + half * node;
            let second = basis_derivatives(&t, span, x)[2];
            for i in 0..ORDER {
                for j in 0..ORDER {
                    penalty[(span - DEGREE + i, span - DEGREE + j)] +=
                        weight * half * second[i] * second[j];
                }
            }
        }
    }

    Ok(RawSplineBasis {
        design,
        penalty,
        knots: knots.clone(),
        points: DVector::from_column_slice(z),
    })
}

/// Everything needed to evaluate a covariate's nonlinear Demmler-Reinsch
/// columns at new raw covariate values.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateBasis {
    pub center: f64,
    pub scale: f64,
    pub knots: KnotSet,
    /// k x (k-2) map from B-spline values to nonlinear columns.
    pub transform: DMatrix<f64>,
    /// Penalty eigenvalue of each nonlinear column, ascending.
    pub gamma_nl: DVector<f64>,
}

impl CovariateBasis {
    pub fn num_nonlinear(&self) -> usize {
        self.transform.ncols()
    }

    pub fn standardize_value(&self, x: f64) -> f64 {
        (x - self.center) / self.scale
    }

    /// B-spline values at `z` on the standardized scale. Outside the boundary
    /// the spline is continued linearly from the nearest boundary knot.
    fn spline_row(&self, t: &[f64], z: f64) -> DVector<f64> {
        let k = self.knots.num_basis();
        let (lo, hi) = self.knots.boundary();
        let (at, step) = if z < lo {
            (lo, z - lo)
        } else if z > hi {
            (hi, z - hi)
        } else {
            (z, 0.0)
        };
        let span = find_span(t, k, at);
        let d = basis_derivatives(t, span, at);
        let mut row = DVector::zeros(k);
        for i in 0..ORDER {
            row[span - DEGREE + i] = d[0][i] + step * d[1][i];
        }
        row
    }

    /// Nonlinear design rows for raw covariate values.
    pub fn nonlinear_design(&self, x: &[f64]) -> DMatrix<f64> {
        let t = self.knots.augmented();
        let mut out = DMatrix::zeros(x.len(), self.num_nonlinear());
        for (r, &xv) in x.iter().enumerate() {
            let phi = self.spline_row(&t, self.standardize_value(xv));
            out.row_mut(r).copy_from(&(phi.transpose() * &self.transform));
        }
        out
    }
}

/// Demmler-Reinsch form of one covariate's spline basis.
#[derive(Debug, Clone)]
pub struct DRBasis {
    /// The standardized covariate; stands in for the linear DR direction.
    pub linear_col: DVector<f64>,
    /// n x (k-2) orthonormal nonlinear columns.
    pub nonlinear_cols: DMatrix<f64>,
    pub basis: CovariateBasis,
}

impl DRBasis {
    pub fn gamma_nl(&self) -> &DVector<f64> {
        &self.basis.gamma_nl
    }

    pub fn center(&self) -> f64 {
        self.basis.center
    }

    pub fn scale(&self) -> f64 {
        self.basis.scale
    }

    /// Standardize `x`, place `interior_knots` quantile knots and rotate.
    pub fn from_covariate(x: &[f64], interior_knots: usize) -> Result<Self> {
        let std = standardize(x)?;
        let z = std.values.as_slice();
        let knots = quantile_knots(z, interior_knots)?;
        let raw = build_osullivan(z, &knots)?;
        let mut dr = demmler_reinsch(&raw)?;
        dr.basis.center = std.center;
        dr.basis.scale = std.scale;
        Ok(dr)
    }

    /// Penalized spline smoother at smoothing parameter `lambda`: the
    /// projection on {1, linear_col} plus shrunken nonlinear components.
    pub fn smooth(&self, y: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let (mut fit, coefs) = self.affine_projection(y);
        for (i, c) in coefs.iter().enumerate() {
            let shrink = 1.0 / (1.0 + lambda * self.basis.gamma_nl[i]);
            fit.axpy(c * shrink, &self.nonlinear_cols.column(i), 1.0);
        }
        fit
    }

    /// Projection of `y` on the constant and linear directions, and the
    /// nonlinear coordinates of `y`.
    fn affine_projection(&self, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = y.len() as f64;
        let ybar = y.sum() / n;
        let z = &self.linear_col;
        let zbar = z.sum() / n;
        let zc = z.add_scalar(-zbar);
        let slope = zc.dot(y) / zc.norm_squared();
        let fit = zc * slope;
        let fit = fit.add_scalar(ybar);
        let coefs = self.nonlinear_cols.tr_mul(y);
        (fit, coefs)
    }
}

/// Rotate a raw basis to Demmler-Reinsch form.
///
/// With `design = U D V'` and `D^-1 V' penalty V D^-1 = W diag(gamma) W'`,
/// the rotated basis is `U W = design V D^-1 W`. The two columns with
/// vanishing gamma are the intercept and linear directions and are dropped.
pub fn demmler_reinsch(raw: &RawSplineBasis) -> Result<DRBasis> {
    let n = raw.design.nrows();
    let k = raw.design.ncols();
    if n <= k {
        return Err(Error::TooFewObservations {
            required: k + 1,
            found: n,
        });
    }
    let svd = raw.design.clone().svd(false, true);
    let d = &svd.singular_values;
    let v_t = svd.v_t.as_ref().expect("requested V");
    let d_max = d.max();
    let d_min = d.min();
    if d_max <= 0.0 || d_min < 1e-10 * d_max {
        return Err(Error::RankDeficient {
            ratio: if d_max > 0.0 { d_min / d_max } else { 0.0 },
        });
    }
    // V D^-1
    let mut vd = v_t.transpose();
    for (j, mut col) in vd.column_iter_mut().enumerate() {
        col /= d[j];
    }
    let mut omega = vd.transpose() * &raw.penalty * &vd;
    omega = (&omega + omega.transpose()) * 0.5;
    let eig = SymmetricEigen::new(omega);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let gamma_max = eig.eigenvalues[order[k - 1]];
    let null_count = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] <= 1e-8 * gamma_max)
        .count();
    if null_count != 2 {
        return Err(Error::PenaltyNullSpace { found: null_count });
    }
    let nonlinear: Vec<usize> = order[2..].to_vec();
    let w_nl = DMatrix::from_fn(k, k - 2, |r, c| eig.eigenvectors[(r, nonlinear[c])]);
    let gamma_nl = DVector::from_iterator(k - 2, nonlinear.iter().map(|&i| eig.eigenvalues[i]));
    let transform = vd * w_nl;
    let nonlinear_cols = &raw.design * &transform;

    Ok(DRBasis {
        linear_col: raw.points.clone(),
        nonlinear_cols,
        basis: CovariateBasis {
            center: 0.0,
            scale: 1.0,
            knots: raw.knots.clone(),
            transform,
            gamma_nl,
        },
    })
}

/// Smoothing parameter for one response/covariate pair.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SmoothnessParam(pub f64);

impl SmoothnessParam {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// 30 log-spaced values on [1e-4, 1e6].
pub fn default_gcv_grid() -> Vec<f64> {
    let mut grid = crate::linalg::log_spaced_desc(1e6, 1e-4, 30);
    grid.reverse();
    grid
}

/// GCV score `n RSS / (n - tr S)^2` of the bivariate smooth at `lambda`.
pub fn gcv_score(y: &DVector<f64>, dr: &DRBasis, lambda: f64) -> f64 {
    let n = y.len() as f64;
    let (affine, coefs) = dr.affine_projection(y);
    let full_resid = y - &affine - &dr.nonlinear_cols * &coefs;
    let mut rss = full_resid.norm_squared();
    let mut trace = 2.0;
    for (i, c) in coefs.iter().enumerate() {
        let s = 1.0 / (1.0 + lambda * dr.basis.gamma_nl[i]);
        rss += (c * (1.0 - s)).powi(2);
        trace += s;
    }
    n * rss / (n - trace).powi(2)
}

/// Grid value minimizing GCV; ties go to the larger smoothing parameter.
pub fn gcv_lambda3(y: &DVector<f64>, dr: &DRBasis, grid: &[f64]) -> SmoothnessParam {
    assert!(!grid.is_empty(), "GCV grid must be non-empty");
    let mut best = (f64::INFINITY, grid[0]);
    for &lambda in grid {
        let score = gcv_score(y, dr, lambda);
        let tie = (score - best.0).abs() <= 1e-12 * best.0.abs();
        if (score < best.0 && !tie) || (tie && lambda > best.1) {
            best = (score, lambda);
        }
    }
    SmoothnessParam(best.1)
}
