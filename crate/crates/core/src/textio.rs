//! Text serialization shared by all file formats.
//!
//! Structured documents (model, LMFD and config files) are TOML written by
//! [`TomlWriter`] in a fixed key order. Reals are printed in scientific
//! notation with 17 significant digits, which round-trips every finite
//! `f64` exactly. Columnar files are whitespace separated with `#` header
//! lines.

use crate::{Error, Result};
use std::fmt::Write as _;

/// Formats a real with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}

fn check_finite(key: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("non-finite value for `{key}`")))
    }
}

#[derive(Debug, Default)]
pub struct TomlWriter {
    buf: String,
}

impl TomlWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: &str) -> &mut Self {
        for line in text.lines() {
            let _ = writeln!(self.buf, "# {line}");
        }
        self
    }

    pub fn int(&mut self, key: &str, v: i64) -> &mut Self {
        let _ = writeln!(self.buf, "{key} = {v}");
        self
    }

    pub fn boolean(&mut self, key: &str, v: bool) -> &mut Self {
        let _ = writeln!(self.buf, "{key} = {v}");
        self
    }

    pub fn string(&mut self, key: &str, v: &str) -> &mut Self {
        let escaped = v.replace('\\', "\\\\").replace('"', "\\\"");
        let _ = writeln!(self.buf, "{key} = \"{escaped}\"");
        self
    }

    pub fn strings(&mut self, key: &str, v: &[String]) -> &mut Self {
        let items: Vec<String> = v
            .iter()
            .map(|s| format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\"")))
            .collect();
        let _ = writeln!(self.buf, "{key} = [{}]", items.join(", "));
        self
    }

    pub fn float(&mut self, key: &str, v: f64) -> Result<&mut Self> {
        check_finite(key, v)?;
        let _ = writeln!(self.buf, "{key} = {}", fmt_f64(v));
        Ok(self)
    }

    pub fn ints(&mut self, key: &str, v: &[usize]) -> &mut Self {
        let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(self.buf, "{key} = [{}]", items.join(", "));
        self
    }

    pub fn floats(&mut self, key: &str, v: &[f64]) -> Result<&mut Self> {
        let row = float_row(key, v)?;
        let _ = writeln!(self.buf, "{key} = {row}");
        Ok(self)
    }

    /// Nested array, one inner array per line.
    pub fn rows<R: AsRef<[f64]>>(&mut self, key: &str, rows: &[R]) -> Result<&mut Self> {
        if rows.is_empty() {
            let _ = writeln!(self.buf, "{key} = []");
            return Ok(self);
        }
        let _ = writeln!(self.buf, "{key} = [");
        for r in rows {
            let _ = writeln!(self.buf, "  {},", float_row(key, r.as_ref())?);
        }
        let _ = writeln!(self.buf, "]");
        Ok(self)
    }

    pub fn matrix(&mut self, key: &str, m: &nalgebra::DMatrix<f64>) -> Result<&mut Self> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        self.rows(key, &rows)
    }

    pub fn table(&mut self, name: &str) -> &mut Self {
        let _ = writeln!(self.buf, "\n[{name}]");
        self
    }

    pub fn table_array(&mut self, name: &str) -> &mut Self {
        let _ = writeln!(self.buf, "\n[[{name}]]");
        self
    }

    pub fn finish(self) -> String {
        self.buf
    }
}

fn float_row(key: &str, v: &[f64]) -> Result<String> {
    let mut items = Vec::with_capacity(v.len());
    for &x in v {
        check_finite(key, x)?;
        items.push(fmt_f64(x));
    }
    Ok(format!("[{}]", items.join(", ")))
}

/// Builds a dense matrix from nested rows, checking the shape.
pub fn matrix_from_rows(key: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<nalgebra::DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse(format!("`{key}` must be a {nrows}x{ncols} nested array")));
    }
    Ok(nalgebra::DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Parses a finite real, rejecting NaN and infinities.
pub fn parse_finite(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: `{tok}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Parse(format!("line {line}: non-finite value `{tok}`")));
    }
    Ok(v)
}

/// `# key = value` header line, if the line has that shape.
pub fn header_kv(line: &str) -> Option<(&str, &str)> {
    let rest = line.strip_prefix('#')?.trim();
    let (k, v) = rest.split_once('=')?;
    Some((k.trim(), v.trim()))
}

pub fn write_file(path: &std::path::Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(())
}
