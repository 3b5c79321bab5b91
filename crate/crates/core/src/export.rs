//! Plain-text artifact writers: CSV matrices and ASCII grayscale PGM images.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// One line per matrix row, values in shortest round-trip form.
pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_text(path, &matrix_to_csv(m))
}

/// Header line followed by one line per record.
pub fn records_to_csv<R>(header: &[&str], rows: impl IntoIterator<Item = R>, fields: impl Fn(&R) -> Vec<String>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&fields(&r).join(","));
        out.push('\n');
    }
    out
}

/// Maps values linearly so the minimum becomes 0 and the maximum 255.
/// A constant matrix maps to all zeros.
pub fn to_gray_levels(m: &Matrix) -> Result<Vec<u8>> {
    if !m.is_finite() {
        return Err(Error::data("cannot render non-finite values"));
    }
    let s = m.as_slice();
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(s
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect())
}

/// Plain (P2) PGM. Each matrix entry becomes a `cell × cell` block of pixels.
pub fn to_pgm(m: &Matrix, cell: usize) -> Result<String> {
    if cell == 0 {
        return Err(Error::config("PGM cell size must be at least 1"));
    }
    let levels = to_gray_levels(m)?;
    let (w, h) = (m.cols() * cell, m.rows() * cell);
    let mut out = format!("P2\n{w} {h}\n255\n");
    for py in 0..h {
        let line: Vec<String> = (0..w)
            .map(|px| levels[(py / cell) * m.cols() + px / cell].to_string())
            .collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, m: &Matrix, cell: usize) -> Result<()> {
    write_text(path, &to_pgm(m, cell)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips_values() {
        let m = Matrix::new(2, 2, vec![0.1, -2.5, 1e-300, 3.0]).unwrap();
        let text = matrix_to_csv(&m);
        let back: Vec<f64> = text
            .lines()
            .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()))
            .collect();
        assert_eq!(back, m.as_slice());
    }

    #[test]
    fn pgm_scales_to_full_range() {
        let m = Matrix::new(1, 3, vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(to_pgm(&m, 1).unwrap(), "P2\n3 1\n255\n0 128 255\n");
        let big = to_pgm(&m, 2).unwrap();
        assert!(big.starts_with("P2\n6 2\n255\n0 0 128 128 255 255\n"));
        assert_eq!(to_gray_levels(&Matrix::zeros(2, 2)).unwrap(), vec![0; 4]);
        assert!(to_pgm(&m, 0).is_err());
    }
}
