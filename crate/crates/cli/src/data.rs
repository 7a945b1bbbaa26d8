//! Numeric CSV tables with a header row.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub names: Vec<String>,
    /// Column-major values.
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.len())
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }

    /// n x names.len() matrix of the named columns.
    pub fn matrix(&self, names: &[String]) -> CliResult<DMatrix<f64>> {
        let cols = names
            .iter()
            .map(|n| self.column(n).ok_or_else(|| CliError::input(format!("missing column '{n}'"))))
            .collect::<CliResult<Vec<&[f64]>>>()?;
        Ok(DMatrix::from_fn(self.rows(), names.len(), |i, j| cols[j][i]))
    }

    pub fn parse(text: &[u8]) -> CliResult<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text);
        let names: Vec<String> = reader
            .headers()
            .map_err(|e| CliError::input(format!("cannot read header: {e}")))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        if names.is_empty() || names.iter().all(|n| n.is_empty()) {
            return Err(CliError::input("CSV has no header"));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() || !seen.insert(n) {
                return Err(CliError::input(format!("column names must be unique and nonempty ('{n}')")));
            }
        }
        let mut columns = vec![Vec::new(); names.len()];
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| CliError::input(format!("row {}: {e}", row + 1)))?;
            for (j, cell) in record.iter().enumerate() {
                let cell = cell.trim();
                let v: f64 = cell
                    .parse()
                    .map_err(|_| CliError::input(format!("row {}, column '{}': '{cell}' is not a number", row + 1, names[j])))?;
                if !v.is_finite() {
                    return Err(CliError::input(format!("row {}, column '{}': non-finite value", row + 1, names[j])));
                }
                columns[j].push(v);
            }
        }
        if columns[0].is_empty() {
            return Err(CliError::input("CSV has no data rows"));
        }
        Ok(Self { names, columns })
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        Self::parse(&bytes)
    }
}

/// Write a header and the rows of `values`. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_matrix(path: &Path, names: &[String], values: &DMatrix<f64>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| CliError::input(format!("{}: {e}", path.display()));
    w.write_record(names).map_err(io)?;
    for row in values.row_iter() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Write string rows under a header.
pub fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| CliError::input(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}
