//! Labelled feature matrices for external tools.
//!
//! Layout, little-endian: magic `HMGF`, `u32` version, `u32` rows, `u32`
//! cols, `rows` `u32` labels, then `rows * cols` `f32` values row-major.

use std::path::Path;

use super::EngineError;
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"HMGF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub labels: Vec<u32>,
    pub features: Tensor,
}

fn malformed(detail: impl Into<String>) -> EngineError {
    EngineError::Format {
        what: "feature file",
        detail: detail.into(),
    }
}

pub fn encode_features(m: &FeatureMatrix) -> Result<Vec<u8>, EngineError> {
    let (rows, cols) = (m.features.rows(), m.features.cols());
    if m.labels.len() != rows {
        return Err(malformed(format!("{} labels for {rows} rows", m.labels.len())));
    }
    let to_u32 = |n: usize| u32::try_from(n).map_err(|_| malformed(format!("dimension {n} exceeds u32")));
    let mut out = Vec::with_capacity(16 + 4 * rows * (cols + 1));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(rows)?.to_le_bytes());
    out.extend_from_slice(&to_u32(cols)?.to_le_bytes());
    for l in &m.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for &v in m.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix, EngineError> {
    let word = |i: usize| -> Result<[u8; 4], EngineError> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| b.try_into().expect("four bytes"))
            .ok_or_else(|| malformed("truncated"))
    };
    if word(0)? != *FEATURE_MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = u32::from_le_bytes(word(1)?);
    if version != FEATURE_VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let rows = u32::from_le_bytes(word(2)?) as usize;
    let cols = u32::from_le_bytes(word(3)?) as usize;
    let expected = 16 + 4 * rows + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(malformed(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let labels = (0..rows).map(|r| word(4 + r).map(u32::from_le_bytes)).collect::<Result<Vec<_>, _>>()?;
    let data = (0..rows * cols)
        .map(|i| word(4 + rows + i).map(|w| f32::from_le_bytes(w) as f64))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FeatureMatrix {
        labels,
        features: Tensor::matrix(rows, cols, data)?,
    })
}

pub fn write_features(m: &FeatureMatrix, path: &Path) -> Result<(), EngineError> {
    let bytes = encode_features(m)?;
    std::fs::write(path, bytes).map_err(|e| EngineError::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix, EngineError> {
    let bytes = std::fs::read(path).map_err(|e| EngineError::io(path, e))?;
    decode_features(&bytes)
}
