//! Versioned JSON model archive.

use std::path::Path;

use compadre::model::{IterationTuning, ResponseTuning};
use compadre::{
    predict_state, CovariateBasis, Effect, EffectLabels, FitReport, KnotSet, ModelState, PrecisionEstimate,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

/// Row-major matrix with explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    pub fn to_dmatrix(&self) -> CliResult<DMatrix<f64>> {
        if self.rows * self.cols != self.data.len() {
            return Err(CliError::input(format!(
                "matrix of shape {}x{} holds {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisRecord {
    pub center: f64,
    pub scale: f64,
    pub interior_knots: Vec<f64>,
    pub boundary: [f64; 2],
    pub transform: Matrix,
    pub gamma_nl: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecord {
    pub matrix: Matrix,
    pub lambda4: f64,
    pub jitter: Option<f64>,
    pub converged: bool,
    pub duality_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// One value per response.
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub lambda4: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArchive {
    pub format_version: u32,
    pub responses: Vec<String>,
    pub covariates: Vec<String>,
    /// Divisors applied to the responses before fitting.
    pub response_scales: Option<Vec<f64>>,
    /// Whether the error precision was estimated.
    pub joint: bool,
    pub interior_knots: usize,
    pub gcv_grid: Vec<f64>,
    pub bases: Vec<BasisRecord>,
    /// p x Q.
    pub beta_lin: Matrix,
    /// `beta_nl[q][j]`.
    pub beta_nl: Vec<Vec<Vec<f64>>>,
    pub intercepts: Vec<f64>,
    pub precision: PrecisionRecord,
    /// p x Q.
    pub lambda3: Matrix,
    /// `labels[q][j]` as N, L or NL.
    pub labels: Vec<Vec<String>>,
    pub tuning: Vec<IterationRecord>,
    pub mse_trace: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

/// Fit metadata not carried by the report itself.
pub struct ArchiveContext<'a> {
    pub responses: &'a [String],
    pub covariates: &'a [String],
    pub response_scales: Option<Vec<f64>>,
    pub joint: bool,
    pub interior_knots: usize,
    pub gcv_grid: &'a [f64],
}

fn parse_effect(code: &str) -> CliResult<Effect> {
    match code {
        "N" => Ok(Effect::Null),
        "L" => Ok(Effect::Linear),
        "NL" => Ok(Effect::Nonlinear),
        _ => Err(CliError::input(format!("unknown effect label '{code}'"))),
    }
}

fn iteration_record(t: &IterationTuning) -> IterationRecord {
    let pick = |f: fn(&ResponseTuning) -> f64| t.responses.iter().map(f).collect();
    IterationRecord {
        lambda1: pick(|r| r.lambda1),
        lambda2: pick(|r| r.lambda2),
        lambda4: t.lambda4,
    }
}

impl ModelArchive {
    pub fn from_report(report: &FitReport, ctx: ArchiveContext<'_>) -> Self {
        let state = &report.state;
        let p = state.num_covariates();
        let q = state.num_responses();
        Self {
            format_version: FORMAT_VERSION,
            responses: ctx.responses.to_vec(),
            covariates: ctx.covariates.to_vec(),
            response_scales: ctx.response_scales,
            joint: ctx.joint,
            interior_knots: ctx.interior_knots,
            gcv_grid: ctx.gcv_grid.to_vec(),
            bases: report
                .bases
                .iter()
                .map(|b| {
                    let (lo, hi) = b.knots.boundary();
                    BasisRecord {
                        center: b.center,
                        scale: b.scale,
                        interior_knots: b.knots.interior().to_vec(),
                        boundary: [lo, hi],
                        transform: Matrix::from_dmatrix(&b.transform),
                        gamma_nl: b.gamma_nl.as_slice().to_vec(),
                    }
                })
                .collect(),
            beta_lin: Matrix::from_dmatrix(&state.beta_lin),
            beta_nl: state
                .beta_nl
                .iter()
                .map(|per| per.iter().map(|v| v.as_slice().to_vec()).collect())
                .collect(),
            intercepts: state.intercepts.as_slice().to_vec(),
            precision: PrecisionRecord {
                matrix: Matrix::from_dmatrix(&state.precision.precision),
                lambda4: state.precision.lambda4,
                jitter: state.precision.jitter,
                converged: state.precision.converged,
                duality_gap: state.precision.duality_gap,
            },
            lambda3: Matrix::from_dmatrix(&state.lambda3),
            labels: (0..q)
                .map(|r| (0..p).map(|j| report.labels.get(j, r).code().to_string()).collect())
                .collect(),
            tuning: report.tuning.iter().map(iteration_record).collect(),
            mse_trace: report.mse_trace.clone(),
            objective_trace: report.objective_trace.clone(),
            converged: report.converged,
        }
    }

    /// Check shapes and rebuild the bases and model state.
    pub fn restore(&self) -> CliResult<(Vec<CovariateBasis>, ModelState)> {
        if self.format_version != FORMAT_VERSION {
            return Err(CliError::input(format!(
                "unsupported archive version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let p = self.covariates.len();
        let q = self.responses.len();
        let shape = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(CliError::input(format!("archive {what} has the wrong shape")))
            }
        };
        shape(p > 0 && q > 0, "names")?;
        shape(self.bases.len() == p, "bases")?;
        shape(self.beta_nl.len() == q && self.beta_nl.iter().all(|b| b.len() == p), "beta_nl")?;
        shape(self.intercepts.len() == q, "intercepts")?;
        shape(self.labels.len() == q && self.labels.iter().all(|l| l.len() == p), "labels")?;
        shape(self.response_scales.as_ref().is_none_or(|s| s.len() == q), "response_scales")?;
        let beta_lin = self.beta_lin.to_dmatrix()?;
        shape(beta_lin.shape() == (p, q), "beta_lin")?;
        let lambda3 = self.lambda3.to_dmatrix()?;
        shape(lambda3.shape() == (p, q), "lambda3")?;
        let precision = self.precision.matrix.to_dmatrix()?;
        shape(precision.shape() == (q, q), "precision")?;

        let mut bases = Vec::with_capacity(p);
        for b in &self.bases {
            let knots = KnotSet::new(b.interior_knots.clone(), (b.boundary[0], b.boundary[1]))?;
            let transform = b.transform.to_dmatrix()?;
            shape(
                transform.nrows() == knots.num_basis() && transform.ncols() == b.gamma_nl.len(),
                "basis transform",
            )?;
            shape(b.scale > 0.0 && b.scale.is_finite() && b.center.is_finite(), "basis scaling")?;
            bases.push(CovariateBasis {
                center: b.center,
                scale: b.scale,
                knots,
                transform,
                gamma_nl: DVector::from_vec(b.gamma_nl.clone()),
            });
        }
        let beta_nl: Vec<Vec<DVector<f64>>> = self
            .beta_nl
            .iter()
            .map(|per| per.iter().map(|v| DVector::from_vec(v.clone())).collect())
            .collect();
        for per in &beta_nl {
            for (v, b) in per.iter().zip(&bases) {
                shape(v.len() == b.num_nonlinear(), "beta_nl block")?;
            }
        }
        let state = ModelState {
            beta_lin,
            beta_nl,
            intercepts: DVector::from_vec(self.intercepts.clone()),
            precision: PrecisionEstimate {
                precision,
                lambda4: self.precision.lambda4,
                jitter: self.precision.jitter,
                converged: self.precision.converged,
                duality_gap: self.precision.duality_gap,
            },
            lambda3,
        };
        Ok((bases, state))
    }

    pub fn effect_labels(&self) -> CliResult<EffectLabels> {
        let p = self.covariates.len();
        let q = self.responses.len();
        let mut codes = Vec::with_capacity(p * q);
        for j in 0..p {
            for r in 0..q {
                let code = self.labels.get(r).and_then(|l| l.get(j)).ok_or_else(|| CliError::input("archive labels have the wrong shape"))?;
                codes.push(parse_effect(code)?);
            }
        }
        Ok(EffectLabels::new(p, q, codes)?)
    }

    /// Predicted responses on the original scale for raw covariates whose
    /// columns follow `self.covariates`.
    pub fn predict(&self, x: &DMatrix<f64>) -> CliResult<DMatrix<f64>> {
        let (bases, state) = self.restore()?;
        let mut pred = predict_state(&bases, &state, x)?;
        if let Some(scales) = &self.response_scales {
            for (mut col, s) in pred.column_iter_mut().zip(scales) {
                col *= *s;
            }
        }
        Ok(pred)
    }

    pub fn to_json(&self) -> CliResult<String> {
        serde_json::to_string_pretty(self).map_err(|e| CliError::input(format!("cannot serialize archive: {e}")))
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let archive: Self = serde_json::from_str(text).map_err(|e| CliError::input(format!("invalid archive: {e}")))?;
        archive.restore()?;
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
