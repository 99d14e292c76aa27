//! Matrix files.
//!
//! Binary layout (little-endian): the 8 magic bytes `MOREMAT1`, the row and
//! column counts as `u64`, then `rows·cols` IEEE-754 `f64` values in
//! row-major order.
//!
//! CSV layout: comma-separated decimal rows. When the first field of the
//! first data row is not a number, the first column is read as a string id.
//! A header row is skipped only when requested.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const BIN_MAGIC: &[u8; 8] = b"MOREMAT1";
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    Bin,
}

impl MatrixFormat {
    /// `.bin` files are binary; anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("bin") => MatrixFormat::Bin,
            _ => MatrixFormat::Csv,
        }
    }
}

/// A matrix read from CSV together with its optional row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub values: Array2<f64>,
    pub ids: Option<Vec<String>>,
}

pub fn encode_bin(m: ArrayView2<'_, f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(BIN_MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes the binary layout; `source` names the origin in error messages.
pub fn decode_bin(bytes: &[u8], source: &Path) -> Result<Array2<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            source,
            format!("offset {}", bytes.len()),
            "file ends inside the 24-byte header",
        ));
    }
    if &bytes[..8] != BIN_MAGIC {
        return Err(Error::format(source, "offset 0", "bad magic bytes, expected MOREMAT1"));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let count = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::format(source, "offset 8", format!("{rows}x{cols} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < count {
        return Err(Error::format(
            source,
            format!("offset {}", bytes.len()),
            format!("truncated payload: {rows}x{cols} needs {count} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > count {
        return Err(Error::format(
            source,
            format!("offset {}", HEADER_LEN + count),
            "trailing bytes after the payload",
        ));
    }
    let mut values = Vec::with_capacity(count / 8);
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::format(
                source,
                format!("offset {}", HEADER_LEN + 8 * i),
                format!("non-finite value {v}"),
            ));
        }
        values.push(v);
    }
    Ok(Array2::from_shape_vec((rows as usize, cols as usize), values).expect("shape checked"))
}

fn parse_cell(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok()
}

/// Reads a CSV matrix, detecting an optional id column.
pub fn load_matrix_csv(path: &Path, has_header: bool) -> Result<LabeledMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    if has_header {
        lines.next();
    }
    let mut values = Vec::new();
    let mut ids: Option<Vec<String>> = None;
    let mut cols: Option<usize> = None;
    let mut rows = 0usize;
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if rows == 0 && parse_cell(fields[0]).is_none() {
            ids = Some(Vec::new());
        }
        let numeric = match &mut ids {
            Some(ids) => {
                ids.push(fields[0].trim().to_string());
                &fields[1..]
            }
            None => &fields[..],
        };
        match cols {
            None => cols = Some(numeric.len()),
            Some(c) if c != numeric.len() => {
                return Err(Error::format(
                    path,
                    format!("line {}", lineno + 1),
                    format!("ragged row: {} values, expected {c}", numeric.len()),
                ))
            }
            _ => {}
        }
        for (c, cell) in numeric.iter().enumerate() {
            let v = parse_cell(cell).ok_or_else(|| {
                Error::format(
                    path,
                    format!("line {}, column {}", lineno + 1, c + 1),
                    format!("non-numeric cell {:?}", cell.trim()),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::format(
                    path,
                    format!("line {}, column {}", lineno + 1, c + 1),
                    format!("non-finite value {v}"),
                ));
            }
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(Error::format(path, "line 1", "empty matrix: no data rows"));
    }
    Ok(LabeledMatrix {
        values: Array2::from_shape_vec((rows, cols), values).expect("row lengths checked"),
        ids,
    })
}

/// Loads a matrix in the given format, discarding any CSV id column.
pub fn load_matrix(path: &Path, format: MatrixFormat) -> Result<Array2<f64>> {
    match format {
        MatrixFormat::Csv => Ok(load_matrix_csv(path, false)?.values),
        MatrixFormat::Bin => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_bin(&bytes, path)
        }
    }
}

/// Writes a CSV matrix. Values use the shortest representation that reads
/// back to the identical `f64`.
pub fn save_matrix_csv(
    path: &Path,
    m: ArrayView2<'_, f64>,
    ids: Option<&[String]>,
    header: Option<&[String]>,
) -> Result<()> {
    if let Some(ids) = ids {
        if ids.len() != m.nrows() {
            return Err(Error::argument(format!("{} ids for {} rows", ids.len(), m.nrows())));
        }
    }
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for (i, row) in m.outer_iter().enumerate() {
        let mut first = true;
        if let Some(ids) = ids {
            out.push_str(&ids[i]);
            first = false;
        }
        for v in row.iter() {
            if !first {
                out.push(',');
            }
            out.push_str(&v.to_string());
            first = false;
        }
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn save_matrix(path: &Path, m: ArrayView2<'_, f64>, format: MatrixFormat) -> Result<()> {
    match format {
        MatrixFormat::Csv => save_matrix_csv(path, m, None, None),
        MatrixFormat::Bin => write_file(path, &encode_bin(m)),
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
