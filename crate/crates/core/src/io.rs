//! Small CSV helpers for matrices and label vectors.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces every value exactly.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Header `{prefix}0,...,{prefix}{c-1}` followed by one line per row.
pub fn matrix_to_csv(m: &Matrix, prefix: &str) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..m.cols()).map(|j| format!("{prefix}{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

/// Parses a header line plus numeric rows.
pub fn matrix_from_csv(text: &str) -> Result<Matrix> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty csv".into()))?;
    let cols = if header.trim().is_empty() {
        0
    } else {
        header.split(',').count()
    };
    let mut data = Vec::new();
    let mut rows = 0;
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(Error::Parse(format!(
                "line {}: expected {cols} fields, got {}",
                n + 2,
                fields.len()
            )));
        }
        for f in fields {
            data.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("line {}: bad number {f:?}", n + 2)))?,
            );
        }
        rows += 1;
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn labels_to_csv(labels: &[usize]) -> String {
    let mut out = String::from("y\n");
    for l in labels {
        let _ = writeln!(out, "{l}");
    }
    out
}

pub fn labels_from_csv(text: &str) -> Result<Vec<usize>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "y" => {}
        other => return Err(Error::Parse(format!("expected header 'y', got {other:?}"))),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad label {l:?}", n + 2)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_csv_round_trip() {
        let m = Matrix::from_rows(&[[0.1, -2.5e-17], [1.0 / 3.0, 7.0]]).unwrap();
        let text = matrix_to_csv(&m, "z");
        assert!(text.starts_with("z0,z1\n"));
        assert_eq!(matrix_from_csv(&text).unwrap(), m);
    }

    #[test]
    fn empty_matrix_csv() {
        let m = matrix_from_csv("z0,z1\n").unwrap();
        assert_eq!(m.shape(), (0, 2));
    }

    #[test]
    fn labels_round_trip() {
        let l = vec![0, 2, 1];
        assert_eq!(labels_from_csv(&labels_to_csv(&l)).unwrap(), l);
        assert!(labels_from_csv("x\n1\n").is_err());
    }
}
