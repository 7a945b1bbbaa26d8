//! Partial-correlation network among responses.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: String,
    pub target: String,
    /// Partial correlation `-p_ab / sqrt(p_aa p_bb)`.
    pub weight: f64,
    pub sign: Sign,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkExport {
    pub nodes: Vec<String>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Dot,
    Json,
}

impl Format {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(Format::Dot),
            "json" => Ok(Format::Json),
            _ => Err(CliError::input(format!("unknown network format '{s}' (expected dot or json)"))),
        }
    }
}

impl NetworkExport {
    /// One edge per nonzero off-diagonal precision entry, in row-major order
    /// of the upper triangle.
    pub fn from_precision(names: &[String], precision: &DMatrix<f64>) -> CliResult<Self> {
        let q = names.len();
        if precision.shape() != (q, q) {
            return Err(CliError::input("precision does not match the response names"));
        }
        if (0..q).any(|a| !(precision[(a, a)] > 0.0)) {
            return Err(CliError::input("precision has a nonpositive diagonal"));
        }
        let mut edges = Vec::new();
        for a in 0..q {
            for b in a + 1..q {
                let p = precision[(a, b)];
                if p == 0.0 {
                    continue;
                }
                let weight = -p / (precision[(a, a)] * precision[(b, b)]).sqrt();
                edges.push(Edge {
                    source: names[a].clone(),
                    target: names[b].clone(),
                    weight,
                    sign: if weight >= 0.0 { Sign::Positive } else { Sign::Negative },
                });
            }
        }
        Ok(Self { nodes: names.to_vec(), edges })
    }

    pub fn render(&self, format: Format) -> CliResult<String> {
        match format {
            Format::Json => serde_json::to_string_pretty(self)
                .map(|s| s + "\n")
                .map_err(|e| CliError::input(format!("cannot serialize network: {e}"))),
            Format::Dot => Ok(self.to_dot()),
        }
    }

    /// Undirected DOT graph. Negative edges are blue, positive edges red,
    /// and pen width scales with the magnitude.
    pub fn to_dot(&self) -> String {
        let quote = |s: &str| format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""));
        let mut out = String::from("graph precision {\n");
        for n in &self.nodes {
            let _ = writeln!(out, "  {};", quote(n));
        }
        for e in &self.edges {
            let color = match e.sign {
                Sign::Positive => "red",
                Sign::Negative => "blue",
            };
            let _ = writeln!(
                out,
                "  {} -- {} [weight={}, color={color}, penwidth={}];",
                quote(&e.source),
                quote(&e.target),
                e.weight,
                1.0 + 4.0 * e.weight.abs()
            );
        }
        out.push_str("}\n");
        out
    }
}
