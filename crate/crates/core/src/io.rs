//! Plain-file persistence for matrices: CSV for inspection, a small binary
//! format for exact round trips.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::Scalar;

const MAGIC: &[u8; 8] = b"ALISMAT1";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::InvalidInput(format!("{}: {e}", path.display()))
}

/// Little-endian `f64` matrix: magic, rows, cols, then column-major entries.
pub fn write_matrix_bin<T: Scalar>(path: &Path, m: &DMatrix<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    write(MAGIC)?;
    write(&(m.nrows() as u64).to_le_bytes())?;
    write(&(m.ncols() as u64).to_le_bytes())?;
    for v in m.iter() {
        write(&v.as_f64().to_le_bytes())?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_matrix_bin<T: Scalar>(path: &Path) -> Result<DMatrix<T>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut head = [0u8; 24];
    r.read_exact(&mut head).map_err(|e| io_err(path, e))?;
    if &head[..8] != MAGIC {
        return Err(Error::invalid(format!("{}: not a matrix file", path.display())));
    }
    let rows = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(head[16..24].try_into().expect("8 bytes")) as usize;
    let mut data = vec![0u8; rows * cols * 8];
    r.read_exact(&mut data).map_err(|e| io_err(path, e))?;
    let vals = data
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))));
    Ok(DMatrix::from_iterator(rows, cols, vals))
}

/// One CSV row per matrix row; `header` names the columns.
pub fn write_matrix_csv<T: Scalar>(path: &Path, m: &DMatrix<T>, header: &[String]) -> Result<()> {
    if !header.is_empty() && header.len() != m.ncols() {
        return Err(Error::DimensionMismatch {
            context: "CSV header",
            expected: m.ncols(),
            got: header.len(),
        });
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut out = String::new();
    if !header.is_empty() {
        out.push_str(&header.join(","));
        out.push('\n');
    }
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)].as_f64())).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    w.write_all(out.as_bytes()).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a numeric CSV, skipping a header line if it does not parse.
pub fn read_matrix_csv<T: Scalar>(path: &Path) -> Result<DMatrix<T>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if k == 0 => continue,
            Err(e) => return Err(Error::invalid(format!("{}:{}: {e}", path.display(), k + 1))),
        }
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::invalid(format!("{}: ragged rows", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| T::of(rows[i][j])))
}
