//! File output helpers and the model file format.
//!
//! Model layout (little-endian): `b"DPFM" | u32 d | d f32 values`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParameterVector;

pub const MODEL_MAGIC: [u8; 4] = *b"DPFM";

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place, so readers see either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Model weights rounded to `f32`.
pub fn model_to_bytes(w: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * w.len());
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&(w.len() as u32).to_le_bytes());
    for &v in w {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn parse_model(bytes: &[u8], path: &Path) -> Result<ParameterVector> {
    if bytes.len() < 8 || bytes[0..4] != MODEL_MAGIC {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "not a model file".to_string(),
        });
    }
    let d = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let expected = 8 + 4 * d;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingData {
            path: path.to_path_buf(),
            extra: bytes.len() - expected,
        });
    }
    let values = bytes[8..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Ok(ParameterVector::new(values))
}

pub fn save_model(path: &Path, w: &[f64]) -> Result<()> {
    write_atomic(path, &model_to_bytes(w))
}

pub fn load_model(path: &Path) -> Result<ParameterVector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_model(&bytes, path)
}

/// The model exactly as it will read back from disk.
pub fn quantize_model(w: &[f64]) -> ParameterVector {
    ParameterVector::new(w.iter().map(|&v| f64::from(v as f32)).collect())
}
