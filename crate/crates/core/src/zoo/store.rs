//! `.stzo` parameter-matrix files.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "STZO"
//!      4     2  version (u16 LE) = 1
//!      6     4  d, row width (u32 LE)
//!     10     4  N, row count (u32 LE)
//!     14     1  dtype tag, 1 = f32
//!     15     9  reserved, zero
//!     24 4*N*d  rows, row-major little-endian f32
//!      …     …  UTF-8 JSON manifest until EOF
//! ```
//!
//! The manifest must carry `n` and `d` matching the header.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"STZO";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
const DTYPE_F32: u8 = 1;

/// Rounds every entry to the nearest `f32`, the precision rows are stored at.
pub fn round_to_f32(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

pub fn encode<M: Serialize>(matrix: &Matrix, manifest: &M) -> Result<Vec<u8>> {
    let n = u32::try_from(matrix.rows()).map_err(|_| Error::invalid("too many rows"))?;
    let d = u32::try_from(matrix.cols()).map_err(|_| Error::invalid("rows too wide"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + matrix.as_slice().len() * 4 + 256);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&[0u8; 9]);
    debug_assert_eq!(out.len(), HEADER_LEN);
    for v in matrix.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    serde_json::to_writer(&mut out, manifest)?;
    Ok(out)
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8]) -> Result<(Matrix, M)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corruption(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic, not a .stzo file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported .stzo version {version}")));
    }
    let d = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if bytes[14] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype tag {}", bytes[14])));
    }
    let body = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::Corruption("header dimensions overflow".into()))?;
    let end = HEADER_LEN + body;
    if bytes.len() < end {
        return Err(Error::Corruption(format!(
            "truncated: {} of {} payload bytes present",
            bytes.len() - HEADER_LEN,
            body
        )));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let raw: serde_json::Value = serde_json::from_slice(&bytes[end..])
        .map_err(|e| Error::Corruption(format!("manifest unreadable: {e}")))?;
    let get = |key: &str| raw.get(key).and_then(|v| v.as_u64()).map(|v| v as usize);
    if get("n") != Some(n) || get("d") != Some(d) {
        return Err(Error::Corruption(format!(
            "manifest dims (n={:?}, d={:?}) disagree with header (n={n}, d={d})",
            get("n"),
            get("d")
        )));
    }
    let manifest = serde_json::from_value(raw)
        .map_err(|e| Error::Corruption(format!("manifest malformed: {e}")))?;
    Ok((Matrix::from_vec(n, d, data)?, manifest))
}

pub fn write<M: Serialize>(path: &Path, matrix: &Matrix, manifest: &M) -> Result<()> {
    let bytes = encode(matrix, manifest)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read<M: DeserializeOwned>(path: &Path) -> Result<(Matrix, M)> {
    decode(&fs::read(path)?)
}
