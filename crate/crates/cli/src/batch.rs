//! Headerless CSV batches: one set element per line.

use crate::error::{CliError, Result};
use slotset_core::Matrix;
use std::path::Path;

/// Parses `text` as rows of `d` finite floats. With `d = None` the width is
/// taken from the first row. Blank lines are skipped.
pub fn parse_batch(label: &str, text: &str, d: Option<usize>) -> Result<Matrix<f64>> {
    let err = |line: usize, field: Option<usize>, detail: String| CliError::Parse {
        path: label.to_string(),
        line,
        field,
        detail,
    };
    let mut width = d;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let want = *width.get_or_insert(fields.len());
        if fields.len() != want {
            return Err(err(i + 1, None, format!("expected {want} fields, found {}", fields.len())));
        }
        for (j, f) in fields.iter().enumerate() {
            match f.parse::<f64>() {
                Ok(v) if v.is_finite() => data.push(v),
                _ => return Err(err(i + 1, Some(j + 1), format!("`{f}` is not a finite number"))),
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::Data(format!("{label}: batch has no rows")));
    }
    Ok(Matrix::from_vec(rows, width.unwrap_or(0), data)?)
}

pub fn read_batch(path: &Path, d: Option<usize>) -> Result<Matrix<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_batch(&path.display().to_string(), &text, d)
}

/// One CSV line per row, 17 significant digits.
pub fn to_csv(m: &Matrix<f64>) -> String {
    let mut out = String::new();
    for row in m.iter_rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
