//! `NPOL` normality-pool files.
//!
//! Layout (little-endian): magic, u32 version, u64 build seed, u32 N_P,
//! u32 d, 32-byte projection fingerprint, N_P·d f64 entries, then the ids
//! joined by newlines.

use std::path::Path;

use contrastive_core::pool::NormalityPool;
use contrastive_core::Tensor;

use crate::error::{CliError, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"NPOL";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 8 + 4 + 4 + 32;

pub fn encode(pool: &NormalityPool) -> Vec<u8> {
    let e = &pool.entries;
    let mut out = Vec::with_capacity(HEADER + 8 * e.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&pool.build_seed.to_le_bytes());
    out.extend_from_slice(&(e.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(e.cols() as u32).to_le_bytes());
    out.extend_from_slice(&pool.projection_fingerprint);
    for &x in e.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(pool.ids.join("\n").as_bytes());
    out
}

pub fn decode(bytes: &[u8]) -> Result<NormalityPool, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic {
            expected: "NPOL".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    if bytes.len() < HEADER {
        return Err(FormatError::Truncated {
            expected: HEADER,
            actual: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(FormatError::Version {
            expected: VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let seed = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let (n, d) = (u32_at(16) as usize, u32_at(20) as usize);
    let fingerprint: [u8; 32] = bytes[24..56].try_into().unwrap();
    let end = HEADER + 8 * n * d;
    if bytes.len() < end {
        return Err(FormatError::Truncated {
            expected: end,
            actual: bytes.len(),
        });
    }
    let data: Vec<f64> = bytes[HEADER..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let ids_text = String::from_utf8(bytes[end..].to_vec())?;
    let ids: Vec<String> = if ids_text.is_empty() {
        Vec::new()
    } else {
        ids_text.split('\n').map(String::from).collect()
    };
    let entries = Tensor::new(n, d, data).map_err(|e| FormatError::Invalid(e.to_string()))?;
    NormalityPool::new(entries, ids, seed, fingerprint)
        .map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn save(pool: &NormalityPool, path: &Path) -> Result<()> {
    std::fs::write(path, encode(pool)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<NormalityPool> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| CliError::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool() -> NormalityPool {
        let entries = Tensor::from_rows(&[[0.1, -2.5e-300], [f64::MAX, 3.0]]).unwrap();
        NormalityPool::new(entries, vec!["a".into(), "b".into()], 42, [7; 32]).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = pool();
        let back = decode(&encode(&p)).unwrap();
        assert_eq!(back.ids, p.ids);
        assert_eq!(back.build_seed, 42);
        assert_eq!(back.projection_fingerprint, [7; 32]);
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.entries), bits(&p.entries));
    }

    #[test]
    fn rejects_bad_headers() {
        let good = encode(&pool());
        let mut m = good.clone();
        m[1] = b'X';
        assert!(matches!(decode(&m), Err(FormatError::BadMagic { .. })));
        let mut v = good.clone();
        v[4] = 2;
        assert!(matches!(decode(&v), Err(FormatError::Version { .. })));
        assert!(matches!(
            decode(&good[..HEADER + 3]),
            Err(FormatError::Truncated { .. })
        ));
    }
}
