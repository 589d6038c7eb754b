//! File formats: a binary dense complex matrix, CSV tables and legacy VTK
//! structured points.
//!
//! Binary matrix layout (all little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `CSIMAT01` |
//! | 8     | rows (u64) |
//! | 8     | cols (u64) |
//! | 8     | angular frequency (f64) |
//! | 8     | solver tolerance (f64) |
//! | 64    | content key, ASCII hex, zero padded |
//! | 16 each | entries as (re, im) f64 pairs, row-major |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{CsiError, Result};
use crate::grid::YeeGrid;

const MAGIC: &[u8; 8] = b"CSIMAT01";
const KEY_LEN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixHeader {
    pub omega: f64,
    pub tol: f64,
    pub key: String,
}

pub fn write_matrix(path: &Path, header: &MatrixHeader, m: &Array2<Complex64>) -> Result<()> {
    if header.key.len() > KEY_LEN || !header.key.is_ascii() {
        return Err(CsiError::InvalidArgument("matrix key must be at most 64 ASCII bytes".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    w.write_all(&header.omega.to_le_bytes())?;
    w.write_all(&header.tol.to_le_bytes())?;
    let mut key = [0u8; KEY_LEN];
    key[..header.key.len()].copy_from_slice(header.key.as_bytes());
    w.write_all(&key)?;
    for v in m.iter() {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn truncated(e: std::io::Error) -> CsiError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        CsiError::BadFile("file truncated".into())
    } else {
        CsiError::Io(e)
    }
}

pub fn read_matrix_header(path: &Path) -> Result<(MatrixHeader, [usize; 2])> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r)
}

fn read_header(r: &mut impl Read) -> Result<(MatrixHeader, [usize; 2])> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(CsiError::BadFile("wrong magic".into()));
    }
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let omega = read_f64(r)?;
    let tol = read_f64(r)?;
    let mut key = [0u8; KEY_LEN];
    r.read_exact(&mut key).map_err(truncated)?;
    let end = key.iter().position(|&b| b == 0).unwrap_or(KEY_LEN);
    let key = std::str::from_utf8(&key[..end])
        .map_err(|_| CsiError::BadFile("key is not ASCII".into()))?
        .to_string();
    Ok((MatrixHeader { omega, tol, key }, [rows, cols]))
}

pub fn read_matrix(path: &Path) -> Result<(MatrixHeader, Array2<Complex64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let (header, [rows, cols]) = read_header(&mut r)?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| CsiError::BadFile("dimensions overflow".into()))?;
    let expected = 104 + 16 * n as u64;
    let actual = std::fs::metadata(path)?.len();
    if actual != expected {
        return Err(CsiError::BadFile(format!(
            "size {actual} bytes, header implies {expected}"
        )));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let re = read_f64(&mut r)?;
        let im = read_f64(&mut r)?;
        data.push(Complex64::new(re, im));
    }
    let m = Array2::from_shape_vec((rows, cols), data).map_err(|e| CsiError::BadFile(e.to_string()))?;
    Ok((header, m))
}

/// Writes `header` then one line per row, comma separated.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Complex matrix as CSV with columns `row,col,re,im`.
pub fn write_matrix_csv(path: &Path, m: &Array2<Complex64>) -> Result<()> {
    let rows: Vec<Vec<String>> = m
        .indexed_iter()
        .map(|((i, j), v)| vec![i.to_string(), j.to_string(), format!("{:e}", v.re), format!("{:e}", v.im)])
        .collect();
    write_csv(path, &["row", "col", "re", "im"], &rows)
}

/// Per-cell scalar fields as legacy-VTK structured points (cell data).
pub fn write_vtk_cells(path: &Path, grid: &YeeGrid, fields: &[(&str, &[f64])]) -> Result<()> {
    let n = grid.num_cells();
    if let Some((name, _)) = fields.iter().find(|(_, v)| v.len() != n) {
        return Err(CsiError::DimensionMismatch(format!("field {name} is not one value per cell")));
    }
    let [nx, ny, nz] = grid.dims();
    let [hx, hy, hz] = grid.spacing();
    let o = grid.origin();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "csi3d cell data")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_POINTS")?;
    writeln!(w, "DIMENSIONS {} {} {}", nx + 1, ny + 1, nz + 1)?;
    writeln!(w, "ORIGIN {} {} {}", o[0], o[1], o[2])?;
    writeln!(w, "SPACING {hx} {hy} {hz}")?;
    writeln!(w, "CELL_DATA {n}")?;
    for (name, values) in fields {
        writeln!(w, "SCALARS {name} double 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for v in values.iter() {
            writeln!(w, "{v:e}")?;
        }
    }
    w.flush()?;
    Ok(())
}
