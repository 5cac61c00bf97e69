//! Minimal CSV reading/writing for numeric tables.
//!
//! All reals are written with 17 significant digits (`{:.16e}`) so a parse of
//! the written text recovers the exact f64 bit pattern.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Format one real with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write a matrix as CSV with one row per matrix row and the given header.
pub fn write_matrix(path: &Path, header: &[String], m: &DenseMatrix) -> Result<()> {
    if header.len() != m.cols() {
        return Err(Error::Dimension(format!(
            "csv header has {} fields for {} columns",
            header.len(),
            m.cols()
        )));
    }
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..m.rows() {
        let mut first = true;
        for v in m.row(i) {
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a CSV written by [`write_matrix`]; returns (header, matrix).
pub fn read_matrix(path: &Path) -> Result<(Vec<String>, DenseMatrix)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty csv", path.display())))?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let cols = header.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut n = 0;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|e| {
                Error::Parse(format!("{} line {}: {e}", path.display(), lineno + 2))
            })?;
            data.push(v);
            n += 1;
        }
        if n != cols {
            return Err(Error::Parse(format!(
                "{} line {}: {n} fields, expected {cols}",
                path.display(),
                lineno + 2
            )));
        }
        rows += 1;
    }
    Ok((header, DenseMatrix::new(rows, cols, data)?))
}

/// Column headers `prefix0..prefix{n-1}`.
pub fn indexed_header(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let dir = std::env::temp_dir().join("ladderlab_csvio_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        let m = DenseMatrix::new(2, 3, vec![1.0 / 3.0, -2.5e-17, 1e300, 0.1, -0.0, 42.0]).unwrap();
        write_matrix(&path, &indexed_header("c", 3), &m).unwrap();
        let (header, back) = read_matrix(&path).unwrap();
        assert_eq!(header, vec!["c0", "c1", "c2"]);
        assert_eq!(back.data(), m.data());
        std::fs::remove_dir_all(&dir).ok();
    }
}
