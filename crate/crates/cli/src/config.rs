//! Flat `key = value` fit configuration.
//!
//! ```text
//! # roles
//! responses = protein_a, protein_b
//! covariates = gene_1, gene_2, gene_3   # default: every other column
//!
//! mode = compadre          # or padre
//! folds = 5
//! max_iters = 5
//! tol = 1e-4
//! knots = 9                # interior knots per covariate
//! lambda1 = cv             # or one value, or one per response
//! lambda2 = cv
//! lambda4 = cv             # or one value
//! select_once = false
//! seed = 0
//! path_length = 50
//! path_min_ratio = 1e-3
//! factor = cholesky        # or sqrt
//! scale_responses = false
//! ```

use std::collections::HashSet;

use compadre::solvers::FactorKind;
use compadre::{FitConfig, Mode, PenaltySpec, PrecisionPenalty};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub responses: Vec<String>,
    /// `None` selects every non-response column.
    pub covariates: Option<Vec<String>>,
    /// Divide each response by its standard deviation before fitting.
    pub scale_responses: bool,
    pub fit: FitConfig,
}

fn names(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::input(format!("{key}: cannot parse '{value}'")))
}

fn boolean(key: &str, value: &str) -> CliResult<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::input(format!("{key}: expected true or false, got '{value}'"))),
    }
}

fn penalty(key: &str, value: &str) -> CliResult<PenaltySpec> {
    if value.eq_ignore_ascii_case("cv") {
        return Ok(PenaltySpec::Cv);
    }
    let values = value
        .split(',')
        .map(|v| number::<f64>(key, v.trim()))
        .collect::<CliResult<Vec<f64>>>()?;
    Ok(PenaltySpec::Fixed(values))
}

pub fn parse_config(text: &str) -> CliResult<FitSettings> {
    let mut fit = FitConfig::default();
    let mut responses = None;
    let mut covariates = None;
    let mut scale_responses = false;
    let mut seen = HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::input(format!("line {}: expected key = value", lineno + 1)))?;
        let (key, value) = (key.trim().to_ascii_lowercase(), value.trim());
        if !seen.insert(key.clone()) {
            return Err(CliError::input(format!("line {}: duplicate key '{key}'", lineno + 1)));
        }
        match key.as_str() {
            "responses" => responses = Some(names(value)),
            "covariates" => covariates = Some(names(value)),
            "mode" => {
                fit.mode = match value.to_ascii_lowercase().as_str() {
                    "compadre" => Mode::Compadre,
                    "padre" => Mode::Padre,
                    _ => return Err(CliError::input(format!("mode: unknown value '{value}'"))),
                }
            }
            "folds" => fit.folds = number(&key, value)?,
            "max_iters" => fit.max_iters = number(&key, value)?,
            "tol" => fit.tol = number(&key, value)?,
            "knots" => fit.interior_knots = number(&key, value)?,
            "lambda1" => fit.lambda1 = penalty(&key, value)?,
            "lambda2" => fit.lambda2 = penalty(&key, value)?,
            "lambda4" => {
                fit.lambda4 = if value.eq_ignore_ascii_case("cv") {
                    PrecisionPenalty::Cv
                } else {
                    PrecisionPenalty::Fixed(number(&key, value)?)
                }
            }
            "select_once" => fit.select_once = boolean(&key, value)?,
            "seed" => fit.seed = number(&key, value)?,
            "path_length" => fit.path.len = number(&key, value)?,
            "path_min_ratio" => fit.path.min_ratio = number(&key, value)?,
            "factor" => {
                fit.factor = match value.to_ascii_lowercase().as_str() {
                    "cholesky" => FactorKind::Cholesky,
                    "sqrt" => FactorKind::SymmetricSqrt,
                    _ => return Err(CliError::input(format!("factor: unknown value '{value}'"))),
                }
            }
            "scale_responses" => scale_responses = boolean(&key, value)?,
            _ => return Err(CliError::input(format!("line {}: unknown key '{key}'", lineno + 1))),
        }
    }
    let responses = responses
        .filter(|r| !r.is_empty())
        .ok_or_else(|| CliError::input("config must name the responses"))?;
    if fit.path.len == 0 || !(fit.path.min_ratio > 0.0 && fit.path.min_ratio < 1.0) {
        return Err(CliError::input("path_length must be positive and path_min_ratio in (0, 1)"));
    }
    fit.validate(responses.len())?;
    Ok(FitSettings {
        responses,
        covariates,
        scale_responses,
        fit,
    })
}
