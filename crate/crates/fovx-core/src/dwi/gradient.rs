//! Plain-text gradient table (bvals/bvecs) and 4x4 affine parsing.

use std::fmt::Write as _;
use std::path::Path;

use crate::dwi::{Affine4, GradientTable};
use crate::error::{FovxError, Result};

fn parse_numbers(text: &str, what: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for line in text.lines() {
        let mut row = Vec::new();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| FovxError::Format(format!("non-numeric token {tok:?} in {what}")))?;
            row.push(v);
        }
        if !row.is_empty() {
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Parse bvals (whitespace-separated) and bvecs (3 rows x V columns).
///
/// V x 3 bvec files are detected by shape and transposed with a warning on
/// stderr.
pub fn read_gradient_table<P: AsRef<Path>, Q: AsRef<Path>>(
    bval_path: P,
    bvec_path: Q,
    b0_threshold: f64,
) -> Result<GradientTable> {
    let bval_text = std::fs::read_to_string(bval_path.as_ref())?;
    let bvec_text = std::fs::read_to_string(bvec_path.as_ref())?;
    let bvals: Vec<f64> = parse_numbers(&bval_text, "bvals")?
        .into_iter()
        .flatten()
        .collect();
    if bvals.is_empty() {
        return Err(FovxError::Format("empty bvals file".into()));
    }
    let v = bvals.len();
    let rows = parse_numbers(&bvec_text, "bvecs")?;
    let bvecs: Vec<[f64; 3]> = if rows.len() == 3 && rows.iter().all(|r| r.len() == v) {
        (0..v).map(|i| [rows[0][i], rows[1][i], rows[2][i]]).collect()
    } else if rows.len() == v && rows.iter().all(|r| r.len() == 3) && v != 3 {
        eprintln!("warning: bvecs file is V x 3; transposing to the 3 x V convention");
        rows.iter().map(|r| [r[0], r[1], r[2]]).collect()
    } else {
        return Err(FovxError::Format(format!(
            "bvecs shape does not match {v} bvals (expected 3 rows x {v} columns)"
        )));
    };
    GradientTable::new(bvals, bvecs, b0_threshold)
}

/// Write the table back in the 3 x V row-per-axis convention.
pub fn write_gradient_table<P: AsRef<Path>, Q: AsRef<Path>>(
    table: &GradientTable,
    bval_path: P,
    bvec_path: Q,
) -> Result<()> {
    let bvals = table
        .bvals
        .iter()
        .map(|b| format!("{b}"))
        .collect::<Vec<_>>()
        .join(" ");
    std::fs::write(bval_path, bvals + "\n")?;
    let mut out = String::new();
    for axis in 0..3 {
        let row = table
            .bvecs
            .iter()
            .map(|g| format!("{}", g[axis]))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(out, "{row}");
    }
    std::fs::write(bvec_path, out)?;
    Ok(())
}

/// Read a 4x4 world-mm registration affine: 4 lines x 4 numbers.
pub fn read_affine_text<P: AsRef<Path>>(path: P) -> Result<Affine4> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let rows = parse_numbers(&text, "affine")?;
    if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
        return Err(FovxError::Format(
            "affine file must be 4 lines of 4 whitespace-separated numbers".into(),
        ));
    }
    let mut a = [[0.0; 4]; 4];
    for (i, row) in rows.iter().enumerate() {
        a[i].copy_from_slice(row);
    }
    Ok(a)
}

pub fn write_affine_text<P: AsRef<Path>>(a: &Affine4, path: P) -> Result<()> {
    let mut out = String::new();
    for row in a {
        let _ = writeln!(out, "{} {} {} {}", row[0], row[1], row[2], row[3]);
    }
    std::fs::write(path, out)?;
    Ok(())
}
