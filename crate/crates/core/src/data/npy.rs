//! Minimal reader/writer for 2-D little-endian float `.npy` arrays.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &[u8] = b"\x93NUMPY";

fn bad(path: &Path, what: &str) -> Error {
    Error::Data(format!("{}: {what}", path.display()))
}

/// Value of `'key':` in a numpy header dict, up to the next top-level comma.
fn field<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let start = header.find(&format!("'{key}'"))? + key.len() + 2;
    let rest = header[start..].trim_start().strip_prefix(':')?.trim_start();
    let end = if rest.starts_with('(') { rest.find(')')? + 1 } else { rest.find(',')? };
    Some(rest[..end].trim())
}

/// Reads a C-ordered `(rows, cols)` array of `<f4` or `<f8`.
pub fn read_npy(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(bad(path, "not an npy file"));
    }
    let (hlen, hstart) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, 12),
        v => return Err(bad(path, &format!("unsupported npy version {v}"))),
    };
    let header = bytes
        .get(hstart..hstart + hlen)
        .and_then(|h| std::str::from_utf8(h).ok())
        .ok_or_else(|| bad(path, "truncated header"))?;
    let descr = field(header, "descr").ok_or_else(|| bad(path, "missing descr"))?;
    let width = match descr.trim_matches(|c| c == '\'' || c == '"') {
        "<f4" => 4,
        "<f8" => 8,
        other => return Err(bad(path, &format!("unsupported dtype {other}"))),
    };
    if field(header, "fortran_order") != Some("False") {
        return Err(bad(path, "only C-ordered arrays are supported"));
    }
    let shape: Vec<usize> = field(header, "shape")
        .ok_or_else(|| bad(path, "missing shape"))?
        .trim_matches(|c| c == '(' || c == ')')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad(path, "malformed shape")))
        .collect::<Result<_>>()?;
    let [rows, cols] = shape[..] else {
        return Err(bad(path, &format!("expected a 2-D array, got shape {shape:?}")));
    };
    let data = &bytes[hstart + hlen..];
    if data.len() != rows * cols * width {
        return Err(bad(path, "payload size does not match shape"));
    }
    let values = data
        .chunks_exact(width)
        .map(|c| match width {
            4 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            _ => f64::from_le_bytes(c.try_into().unwrap()),
        })
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).unwrap())
}

/// Writes `a` as a C-ordered `<f4` array.
pub fn write_npy(path: &Path, a: &Array2<f64>) -> Result<()> {
    let mut header = format!(
        "{{'descr': '<f4', 'fortran_order': False, 'shape': ({}, {}), }}",
        a.nrows(),
        a.ncols()
    );
    // Pad so the payload starts on a 64-byte boundary.
    let total = MAGIC.len() + 4 + header.len() + 1;
    header.push_str(&" ".repeat((64 - total % 64) % 64));
    header.push('\n');
    let mut buf = Vec::with_capacity(10 + header.len() + a.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[1, 0]);
    buf.extend_from_slice(&(header.len() as u16).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for v in a.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
