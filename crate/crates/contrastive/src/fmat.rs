//! `FMAT` feature files: magic, u32 rows, u32 cols, then row-major f32
//! values, all little-endian. Values are widened to f64 on load.

use std::path::Path;

use contrastive_core::features::RawFeatures;
use contrastive_core::Tensor;

use crate::error::{CliError, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"FMAT";
const HEADER: usize = 12;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic {
            expected: "FMAT".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    if bytes.len() < HEADER {
        return Err(FormatError::Truncated {
            expected: HEADER,
            actual: bytes.len(),
        });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = HEADER + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (index, chunk) in bytes[HEADER..].chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().unwrap());
        if !x.is_finite() {
            return Err(FormatError::NonFinite { index });
        }
        data.push(f64::from(x));
    }
    Tensor::new(rows, cols, data).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| CliError::format(path, e))
}

/// Loads a feature file as the patches of `image_id`.
pub fn load_features(path: &Path, image_id: &str) -> Result<RawFeatures> {
    let patches = read(path)?;
    RawFeatures::new(image_id, patches)
        .map_err(|e| CliError::format(path, FormatError::Invalid(e.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value() {
        let mut bytes = b"FMAT".to_vec();
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(7.0f32.to_le_bytes());
        let t = decode(&bytes).unwrap();
        assert_eq!((t.shape(), t.data()), ((1, 1), &[7.0][..]));
    }

    #[test]
    fn resnet_patch_shape() {
        let t = Tensor::filled(49, 2048, 0.5);
        let back = decode(&encode(&t)).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn errors_are_distinct() {
        let good = encode(&Tensor::filled(2, 3, 1.0));
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode(&bad_magic),
            Err(FormatError::BadMagic { .. })
        ));

        let err = decode(&good[..good.len() - 2]).unwrap_err();
        assert!(matches!(
            err,
            FormatError::Truncated {
                expected: 36,
                actual: 34
            }
        ));
        assert!(err.to_string().contains("expected 36 bytes, got 34"));

        let mut nan = good.clone();
        nan[HEADER + 4..HEADER + 8].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode(&nan),
            Err(FormatError::NonFinite { index: 1 })
        ));
    }
}
