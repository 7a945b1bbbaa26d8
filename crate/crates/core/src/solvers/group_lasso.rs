//! Group lasso with a sparsity-smoothness penalty.
//!
//! For blocks `U_j` with diagonal smoothness penalties `Gamma_j`, solves
//!
//! ```text
//! min (1/2n) ||y - b0 - sum_j U_j b_j||^2
//!     + lambda2 sum_j sqrt( b_j' M_j b_j ),   M_j = U_j'U_j / n + lambda3_j Gamma_j
//! ```
//!
//! (designs centered for the intercept). Writing `M_j = R_j' R_j` and
//! `theta_j = R_j b_j` turns the penalty into a plain group lasso in `theta`,
//! which is solved by block coordinate descent. Each block update reduces
//! to a scalar equation for the block norm, solved by Newton's method.

use std::sync::{Arc, OnceLock};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use super::lasso::SolverOptions;
use crate::error::{Error, Result};

/// Symmetric factor used to reparameterize each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FactorKind {
    /// Upper-triangular Cholesky factor.
    #[default]
    Cholesky,
    /// Symmetric square root.
    SymmetricSqrt,
}

/// One covariate's nonlinear block.
#[derive(Debug, Clone, Copy)]
pub struct SmoothBlock<'a> {
    pub design: &'a DMatrix<f64>,
    pub gamma: &'a DVector<f64>,
    pub lambda3: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupLassoFit {
    pub blocks: Vec<DVector<f64>>,
    pub intercept: f64,
    pub lambda2: f64,
    pub active_groups: Vec<usize>,
    pub converged: bool,
    pub sweeps: usize,
}

fn stack_blocks(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks.first().map_or(0, |b| b.nrows());
    let total = blocks.iter().map(|b| b.ncols()).sum();
    let mut u = DMatrix::zeros(n, total);
    let mut off = 0;
    for b in blocks {
        u.view_mut((0, off), (n, b.ncols())).copy_from(*b);
        off += b.ncols();
    }
    u
}

/// Centered Gram of a grouped design. It does not depend on the response
/// and can be shared between problems.
#[derive(Debug, Clone)]
pub struct CenteredGram {
    pub n: usize,
    pub sizes: Vec<usize>,
    /// Centered `U'U` over all groups.
    pub gram: DMatrix<f64>,
    pub col_means: DVector<f64>,
}

impl CenteredGram {
    pub fn from_blocks(blocks: &[&DMatrix<f64>]) -> Result<Self> {
        let n = blocks.first().map_or(0, |b| b.nrows());
        if blocks.iter().any(|b| b.nrows() != n) {
            return Err(Error::DimensionMismatch("blocks differ in row count".into()));
        }
        let u = stack_blocks(blocks);
        let sum_u = DVector::from_iterator(u.ncols(), u.column_iter().map(|c| c.sum()));
        Ok(Self::from_raw(
            n,
            blocks.iter().map(|b| b.ncols()).collect(),
            &u.tr_mul(&u),
            &sum_u,
        ))
    }

    /// Center raw sums `utu = U'U` and `sum_u = U'1`.
    pub fn from_raw(n: usize, sizes: Vec<usize>, utu: &DMatrix<f64>, sum_u: &DVector<f64>) -> Self {
        let nf = n as f64;
        let col_means = sum_u / nf;
        let gram = utu - (&col_means * col_means.transpose()) * nf;
        Self {
            n,
            sizes,
            gram,
            col_means,
        }
    }

    fn offsets(&self) -> Vec<usize> {
        let mut o = Vec::with_capacity(self.sizes.len());
        let mut acc = 0;
        for s in &self.sizes {
            o.push(acc);
            acc += s;
        }
        o
    }
}

/// Centered cross products of a grouped design with one response.
#[derive(Debug, Clone)]
pub struct GroupedGram {
    pub design: Arc<CenteredGram>,
    /// Centered `U'y`.
    pub cross: DVector<f64>,
    pub y_mean: f64,
}

impl GroupedGram {
    pub fn from_blocks(blocks: &[&DMatrix<f64>], y: &DVector<f64>) -> Result<Self> {
        if blocks.iter().any(|b| b.nrows() != y.len()) {
            return Err(Error::DimensionMismatch(
                "block rows differ from response length".into(),
            ));
        }
        let design = Arc::new(CenteredGram::from_blocks(blocks)?);
        let uty = stack_blocks(blocks).tr_mul(y);
        Ok(Self::new(design, &uty, y.sum()))
    }

    /// From raw `uty = U'y` and `sum_y = 1'y`.
    pub fn new(design: Arc<CenteredGram>, uty: &DVector<f64>, sum_y: f64) -> Self {
        let nf = design.n as f64;
        let y_mean = sum_y / nf;
        let cross = uty - &design.col_means * (nf * y_mean);
        Self {
            design,
            cross,
            y_mean,
        }
    }
}

/// A group lasso problem in the reparameterized coordinates.
///
/// Column blocks of the transformed Gram are formed on first use, so groups
/// that never leave zero cost only their factorization.
#[derive(Debug, Clone)]
pub struct GroupLassoProblem {
    design: Arc<CenteredGram>,
    offsets: Vec<usize>,
    /// `R_j^-1` per block.
    factor_inv: Vec<DMatrix<f64>>,
    /// Transformed design times centered response, divided by n.
    c: DVector<f64>,
    /// Column blocks of the transformed Gram divided by n.
    h_cols: Vec<OnceLock<DMatrix<f64>>>,
    /// Eigen decomposition of each diagonal block of that Gram.
    block_eigen: Vec<OnceLock<(DVector<f64>, DMatrix<f64>)>>,
    y_mean: f64,
}

/// Solution in transformed coordinates.
#[derive(Debug, Clone)]
pub struct ThetaSolution {
    pub theta: Vec<DVector<f64>>,
    pub lambda2: f64,
    pub converged: bool,
    pub sweeps: usize,
}

fn factor_of(m: &DMatrix<f64>, kind: FactorKind, group: usize) -> Result<DMatrix<f64>> {
    match kind {
        FactorKind::Cholesky => {
            let chol = Cholesky::new(m.clone()).ok_or(Error::SingularBlock { group })?;
            Ok(chol.l().transpose())
        }
        FactorKind::SymmetricSqrt => {
            let eig = SymmetricEigen::new(m.clone());
            if eig.eigenvalues.iter().any(|&e| !(e > 0.0)) {
                return Err(Error::SingularBlock { group });
            }
            let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
            Ok(&eig.eigenvectors * sqrt * eig.eigenvectors.transpose())
        }
    }
}

fn is_zero(v: &DVector<f64>) -> bool {
    v.iter().all(|&x| x == 0.0)
}

impl GroupLassoProblem {
    /// Build the transformed problem; `lambda3[j]` weights `Gamma_j` in `M_j`.
    pub fn new(
        gram: &GroupedGram,
        gammas: &[&DVector<f64>],
        lambda3: &[f64],
        kind: FactorKind,
    ) -> Result<Self> {
        let design = &gram.design;
        let g = design.sizes.len();
        if gammas.len() != g || lambda3.len() != g {
            return Err(Error::DimensionMismatch(format!(
                "{g} groups, {} gamma vectors, {} lambda3 values",
                gammas.len(),
                lambda3.len()
            )));
        }
        let nf = design.n as f64;
        let offsets = design.offsets();
        let total: usize = design.sizes.iter().sum();
        let mut factor_inv = Vec::with_capacity(g);
        let mut c = DVector::zeros(total);
        for j in 0..g {
            let (o, d) = (offsets[j], design.sizes[j]);
            if gammas[j].len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "group {j} has {d} columns but {} penalty values",
                    gammas[j].len()
                )));
            }
            if !(lambda3[j] >= 0.0) {
                return Err(Error::InvalidConfig(format!("lambda3 = {}", lambda3[j])));
            }
            let mut m = design.gram.view((o, o), (d, d)) / nf;
            for i in 0..d {
                m[(i, i)] += lambda3[j] * gammas[j][i];
            }
            let rinv = factor_of(&m, kind, j)?
                .try_inverse()
                .ok_or(Error::SingularBlock { group: j })?;
            c.rows_mut(o, d)
                .copy_from(&(rinv.tr_mul(&gram.cross.rows(o, d)) / nf));
            factor_inv.push(rinv);
        }
        Ok(Self {
            design: Arc::clone(design),
            offsets,
            factor_inv,
            c,
            h_cols: (0..g).map(|_| OnceLock::new()).collect(),
            block_eigen: (0..g).map(|_| OnceLock::new()).collect(),
            y_mean: gram.y_mean,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.design.sizes.len()
    }

    pub fn n(&self) -> usize {
        self.design.n
    }

    fn size(&self, j: usize) -> usize {
        self.design.sizes[j]
    }

    /// Columns of the transformed Gram (over n) belonging to group `k`.
    fn h_col(&self, k: usize) -> &DMatrix<f64> {
        self.h_cols[k].get_or_init(|| {
            let nf = self.design.n as f64;
            let (ok, dk) = (self.offsets[k], self.size(k));
            let right = self.design.gram.columns(ok, dk) * &self.factor_inv[k];
            let mut out = DMatrix::zeros(right.nrows(), dk);
            for j in 0..self.num_groups() {
                let (oj, dj) = (self.offsets[j], self.size(j));
                let block = self.factor_inv[j].tr_mul(&right.rows(oj, dj)) / nf;
                out.view_mut((oj, 0), (dj, dk)).copy_from(&block);
            }
            out
        })
    }

    fn h_diag(&self, j: usize) -> DMatrix<f64> {
        let hjj = self.h_col(j).rows(self.offsets[j], self.size(j)).clone_owned();
        (&hjj + hjj.transpose()) * 0.5
    }

    fn eigen(&self, j: usize) -> &(DVector<f64>, DMatrix<f64>) {
        self.block_eigen[j].get_or_init(|| {
            let eig = SymmetricEigen::new(self.h_diag(j));
            (eig.eigenvalues, eig.eigenvectors)
        })
    }

    /// Smallest `lambda2` at which every group is zero.
    pub fn lambda_max(&self) -> f64 {
        (0..self.num_groups())
            .map(|j| self.c.rows(self.offsets[j], self.size(j)).norm())
            .fold(0.0, f64::max)
    }

    fn zeros(&self) -> Vec<DVector<f64>> {
        self.design.sizes.iter().map(|&d| DVector::zeros(d)).collect()
    }

    /// Exact minimizer of `0.5 t'H_jj t - g't + lambda ||t||`.
    fn block_update(&self, j: usize, g: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let d = self.size(j);
        if g.norm() <= lambda {
            return DVector::zeros(d);
        }
        let (evals, evecs) = self.eigen(j);
        let gt = evecs.tr_mul(g);
        if lambda == 0.0 {
            let sol = DVector::from_fn(d, |i, _| gt[i] / evals[i]);
            return evecs * sol;
        }
        // Solve S(t)^(-1/2) = 1 with S(t) = sum gt_i^2 / (e_i t + lambda)^2.
        // The left side is concave and increasing in t, so Newton from t = 0
        // approaches the root from below without overshooting.
        let mut t = 0.0f64;
        for _ in 0..200 {
            let mut s = 0.0;
            let mut ds = 0.0;
            for i in 0..d {
                let denom = evals[i] * t + lambda;
                let g2 = gt[i] * gt[i];
                s += g2 / (denom * denom);
                ds += g2 * evals[i] / (denom * denom * denom);
            }
            let f = 1.0 / s.sqrt() - 1.0;
            let fprime = ds / (s * s.sqrt());
            if fprime <= 0.0 {
                break;
            }
            let next = (t - f / fprime).max(0.0);
            let done = (next - t).abs() <= 1e-15 * next.max(1e-300);
            t = next;
            if done {
                break;
            }
        }
        let sol = DVector::from_fn(d, |i, _| gt[i] * t / (evals[i] * t + lambda));
        evecs * sol
    }

    /// Stationarity violation of group `j`.
    fn violation(&self, theta: &[DVector<f64>], h_theta: &DVector<f64>, lambda: f64, j: usize) -> f64 {
        let (o, d) = (self.offsets[j], self.size(j));
        let grad = self.c.rows(o, d) - h_theta.rows(o, d);
        let norm = theta[j].norm();
        if norm > 0.0 {
            (grad - &theta[j] * (lambda / norm)).norm()
        } else {
            (grad.norm() - lambda).max(0.0)
        }
    }

    fn sweep(
        &self,
        groups: &[usize],
        theta: &mut [DVector<f64>],
        h_theta: &mut DVector<f64>,
        lambda: f64,
    ) {
        for &j in groups {
            let (o, d) = (self.offsets[j], self.size(j));
            let mut g = self.c.rows(o, d) - h_theta.rows(o, d);
            if !is_zero(&theta[j]) {
                g += self.h_diag(j) * &theta[j];
            }
            let new = self.block_update(j, &g, lambda);
            let delta = &new - &theta[j];
            if !is_zero(&delta) {
                h_theta.gemv(1.0, self.h_col(j), &delta, 1.0);
                theta[j] = new;
            }
        }
    }

    fn h_times(&self, theta: &[DVector<f64>]) -> DVector<f64> {
        let mut h_theta = DVector::zeros(self.c.len());
        for (j, t) in theta.iter().enumerate() {
            if !is_zero(t) {
                h_theta.gemv(1.0, self.h_col(j), t, 1.0);
            }
        }
        h_theta
    }

    /// Block coordinate descent with an active-set inner loop.
    pub fn solve(
        &self,
        lambda2: f64,
        warm: Option<&[DVector<f64>]>,
        opts: &SolverOptions,
    ) -> ThetaSolution {
        let g = self.num_groups();
        let mut theta = match warm {
            Some(w) if w.len() == g => w.to_vec(),
            _ => self.zeros(),
        };
        let mut h_theta = self.h_times(&theta);
        let bound = opts.tol * if lambda2 > 0.0 { lambda2 } else { 1.0 };
        let all: Vec<usize> = (0..g).collect();
        let mut sweeps = 0;
        let mut converged = false;
        while sweeps < opts.max_sweeps {
            self.sweep(&all, &mut theta, &mut h_theta, lambda2);
            sweeps += 1;
            if all
                .iter()
                .all(|&j| self.violation(&theta, &h_theta, lambda2, j) <= bound)
            {
                converged = true;
                break;
            }
            let active: Vec<usize> = all.iter().cloned().filter(|&j| !is_zero(&theta[j])).collect();
            while sweeps < opts.max_sweeps && !active.is_empty() {
                self.sweep(&active, &mut theta, &mut h_theta, lambda2);
                sweeps += 1;
                if active
                    .iter()
                    .all(|&j| self.violation(&theta, &h_theta, lambda2, j) <= bound)
                {
                    break;
                }
            }
        }
        ThetaSolution {
            theta,
            lambda2,
            converged,
            sweeps,
        }
    }

    /// Map a transformed solution back to block coefficients.
    pub fn to_fit(&self, sol: &ThetaSolution) -> GroupLassoFit {
        let blocks: Vec<DVector<f64>> = sol
            .theta
            .iter()
            .zip(&self.factor_inv)
            .map(|(t, rinv)| if is_zero(t) { DVector::zeros(t.len()) } else { rinv * t })
            .collect();
        let mut intercept = self.y_mean;
        for (j, b) in blocks.iter().enumerate() {
            intercept -= self.design.col_means.rows(self.offsets[j], self.size(j)).dot(b);
        }
        let active_groups = (0..blocks.len()).filter(|&j| !is_zero(&sol.theta[j])).collect();
        GroupLassoFit {
            blocks,
            intercept,
            lambda2: sol.lambda2,
            active_groups,
            converged: sol.converged,
            sweeps: sol.sweeps,
        }
    }

    /// Largest stationarity violation of `sol`.
    pub fn max_violation(&self, sol: &ThetaSolution) -> f64 {
        let h_theta = self.h_times(&sol.theta);
        (0..self.num_groups())
            .map(|j| self.violation(&sol.theta, &h_theta, sol.lambda2, j))
            .fold(0.0, f64::max)
    }
}

/// Fit the sparsity-smoothness group lasso at default tolerances.
pub fn group_lasso_smooth(
    blocks: &[SmoothBlock<'_>],
    y: &DVector<f64>,
    lambda2: f64,
) -> Result<GroupLassoFit> {
    group_lasso_smooth_with(
        blocks,
        y,
        lambda2,
        &SolverOptions::group_lasso(),
        FactorKind::Cholesky,
    )
}

pub fn group_lasso_smooth_with(
    blocks: &[SmoothBlock<'_>],
    y: &DVector<f64>,
    lambda2: f64,
    opts: &SolverOptions,
    kind: FactorKind,
) -> Result<GroupLassoFit> {
    if !(lambda2 >= 0.0) || !lambda2.is_finite() {
        return Err(Error::InvalidConfig(format!("lambda2 = {lambda2}")));
    }
    let problem = problem_from_blocks(blocks, y, kind)?;
    Ok(problem.to_fit(&problem.solve(lambda2, None, opts)))
}

pub fn problem_from_blocks(
    blocks: &[SmoothBlock<'_>],
    y: &DVector<f64>,
    kind: FactorKind,
) -> Result<GroupLassoProblem> {
    let designs: Vec<&DMatrix<f64>> = blocks.iter().map(|b| b.design).collect();
    let gram = GroupedGram::from_blocks(&designs, y)?;
    let gammas: Vec<&DVector<f64>> = blocks.iter().map(|b| b.gamma).collect();
    let lambda3: Vec<f64> = blocks.iter().map(|b| b.lambda3).collect();
    GroupLassoProblem::new(&gram, &gammas, &lambda3, kind)
}

/// `(1/2n)||r||^2 + lambda2 sum_j sqrt(b_j' M_j b_j)` on centered blocks.
pub fn group_objective(blocks: &[SmoothBlock<'_>], y: &DVector<f64>, fit: &GroupLassoFit) -> f64 {
    let n = y.len() as f64;
    let mut resid = y.add_scalar(-fit.intercept);
    let mut penalty = 0.0;
    for (b, coef) in blocks.iter().zip(&fit.blocks) {
        resid -= b.design * coef;
        let (_, centered) = crate::linalg::center_columns(b.design);
        let fit_energy = (&centered * coef).norm_squared() / n;
        let smooth: f64 = coef
            .iter()
            .zip(b.gamma.iter())
            .map(|(c, g)| c * c * g)
            .sum();
        penalty += (fit_energy + b.lambda3 * smooth).sqrt();
    }
    resid.norm_squared() / (2.0 * n) + fit.lambda2 * penalty
}
