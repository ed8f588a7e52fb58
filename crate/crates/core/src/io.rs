//! Little-endian f32 blob helpers shared by the sequence and trace formats.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CamaError, Result};

pub(crate) fn write_f32_blob(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let (lower, _) = values.size_hint();
    let mut bytes = Vec::with_capacity(lower * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| CamaError::io(path, e))
}

/// Reads a blob and checks its size against `expected_bytes`.
pub(crate) fn read_f32_blob(path: &Path, expected_bytes: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| CamaError::io(path, e))?;
    if bytes.len() != expected_bytes || bytes.len() % 4 != 0 {
        return Err(CamaError::BlobLengthMismatch {
            path: path.to_path_buf(),
            expected: expected_bytes,
            found: bytes.len(),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CamaError::NonFiniteValue(path.to_path_buf()));
    }
    Ok(values)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CamaError::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CamaError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CamaError::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
