//! Line-oriented text shared by model and session files.

use crate::error::{CliError, Result};
use slotset_core::Matrix;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.16e}")
    }
}

pub fn parse_float(token: &str) -> Option<f64> {
    match token {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        "nan" => None,
        t => t.parse::<f64>().ok(),
    }
}

pub fn write_matrix(out: &mut String, m: &Matrix<f64>) {
    for row in m.iter_rows() {
        let line: Vec<String> = row.iter().map(|&v| fmt_float(v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

/// Cursor over the non-blank lines of a file, remembering line numbers for
/// diagnostics.
pub struct LineReader<'a> {
    path: String,
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> LineReader<'a> {
    pub fn new(path: impl Into<String>, text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Self {
            path: path.into(),
            lines,
            pos: 0,
        }
    }

    pub fn error(&self, line: usize, field: Option<usize>, detail: impl Into<String>) -> CliError {
        CliError::Parse {
            path: self.path.clone(),
            line,
            field,
            detail: detail.into(),
        }
    }

    fn current_line(&self) -> usize {
        self.lines.get(self.pos).or(self.lines.last()).map_or(0, |(n, _)| *n)
    }

    pub fn peek_key(&self) -> Option<&'a str> {
        self.lines.get(self.pos).and_then(|(_, l)| l.split_whitespace().next())
    }

    pub fn at_end(&self) -> bool {
        self.pos >= self.lines.len()
    }

    /// Next line split on whitespace.
    pub fn next_tokens(&mut self) -> Result<(usize, Vec<&'a str>)> {
        let (n, l) = *self.lines.get(self.pos).ok_or_else(|| self.error(self.current_line(), None, "unexpected end of file"))?;
        self.pos += 1;
        Ok((n, l.split_whitespace().collect()))
    }

    /// A `key value...` line with exactly `arity` values.
    pub fn expect(&mut self, key: &str, arity: usize) -> Result<(usize, Vec<&'a str>)> {
        let (n, t) = self.next_tokens()?;
        if t[0] != key {
            return Err(self.error(n, Some(1), format!("expected `{key}`, found `{}`", t[0])));
        }
        if t.len() != arity + 1 {
            return Err(self.error(n, None, format!("`{key}` takes {arity} value(s), found {}", t.len() - 1)));
        }
        Ok((n, t[1..].to_vec()))
    }

    pub fn expect_value(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (n, v) = self.expect(key, 1)?;
        Ok((n, v[0]))
    }

    pub fn parse_value<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let (n, v) = self.expect_value(key)?;
        v.parse().map_err(|e: T::Err| self.error(n, Some(2), format!("bad `{key}` value `{v}`: {e}")))
    }

    pub fn parse_at<T: std::str::FromStr>(&self, line: usize, field: usize, token: &str, what: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        token.parse().map_err(|e: T::Err| self.error(line, Some(field), format!("bad {what} `{token}`: {e}")))
    }

    pub fn float_at(&self, line: usize, field: usize, token: &str) -> Result<f64> {
        parse_float(token).ok_or_else(|| self.error(line, Some(field), format!("`{token}` is not a number")))
    }

    /// `rows` lines of `cols` floats each.
    pub fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix<f64>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (n, t) = self.next_tokens()?;
            if t.len() != cols {
                return Err(self.error(n, None, format!("expected {cols} values, found {}", t.len())));
            }
            for (i, tok) in t.iter().enumerate() {
                data.push(self.float_at(n, i + 1, tok)?);
            }
        }
        Ok(Matrix::from_vec(rows, cols, data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, -0.0, 1e-300, f64::MAX, f64::MIN_POSITIVE, 5e-324, f64::INFINITY, f64::NEG_INFINITY, std::f64::consts::PI] {
            let back = parse_float(&fmt_float(v)).unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v}");
        }
        assert_eq!(parse_float("nan"), None);
        assert_eq!(parse_float("x"), None);
    }

    #[test]
    fn reader_reports_lines_and_fields() {
        let text = "# comment\n\nalpha 1\nrows\n1 2\n3 zz\n";
        let mut r = LineReader::new("f", text);
        assert_eq!(r.parse_value::<usize>("alpha").unwrap(), 1);
        r.expect("rows", 0).unwrap();
        let err = r.matrix(2, 2).unwrap_err().to_string();
        assert_eq!(err, "f:6 field 2: `zz` is not a number");
        assert!(r.at_end());
        let err = r.next_tokens().unwrap_err().to_string();
        assert!(err.contains("unexpected end of file"), "{err}");
    }
}
