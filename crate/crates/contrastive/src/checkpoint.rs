//! Checkpoint files: the 8-byte magic `CACKPT01`, a one-line JSON manifest
//! ending in `\n`, then every tensor as little-endian f64 in manifest order.

use std::path::Path;

use contrastive_core::decoder::Vocab;
use contrastive_core::model::{Model, ModelConfig};
use contrastive_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, FormatError, Result};

pub const MAGIC: &[u8; 8] = b"CACKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset from the start of the payload section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
}

pub fn encode(model: &Model, vocab: &Vocab) -> Vec<u8> {
    let mut offset = 0;
    let tensors = model
        .param_names()
        .into_iter()
        .zip(model.tensors())
        .map(|(name, t)| {
            let e = TensorEntry {
                name,
                rows: t.rows(),
                cols: t.cols(),
                offset,
            };
            offset += 8 * t.len();
            e
        })
        .collect();
    let manifest = Manifest {
        config: model.config.clone(),
        vocab: vocab.clone(),
        tensors,
    };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&manifest).expect("manifest serializes"));
    out.push(b'\n');
    for t in model.tensors() {
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned();
        if found.starts_with("CACKPT") {
            return Err(FormatError::Version {
                expected: "CACKPT01".into(),
                found,
            });
        }
        return Err(FormatError::BadMagic {
            expected: "CACKPT01".into(),
            found,
        });
    }
    let newline = bytes[8..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| FormatError::Invalid("manifest is not terminated".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + newline])?;
    let payload = &bytes[8 + newline + 1..];

    let mut model =
        Model::init(manifest.config.clone(), 0).map_err(|e| FormatError::Invalid(e.to_string()))?;
    let names = model.param_names();
    if names.len() != manifest.tensors.len()
        || names
            .iter()
            .zip(&manifest.tensors)
            .any(|(n, e)| *n != e.name)
    {
        return Err(FormatError::Invalid(
            "tensor names do not match the model layout".into(),
        ));
    }
    let expected: usize = manifest.tensors.iter().map(|e| 8 * e.rows * e.cols).sum();
    if payload.len() != expected {
        return Err(FormatError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    for (slot, entry) in model.tensors_mut().into_iter().zip(&manifest.tensors) {
        if slot.shape() != (entry.rows, entry.cols) {
            return Err(FormatError::Invalid(format!(
                "{}: stored {}x{}, model expects {}x{}",
                entry.name,
                entry.rows,
                entry.cols,
                slot.rows(),
                slot.cols()
            )));
        }
        let end = entry.offset + 8 * entry.rows * entry.cols;
        let raw = payload
            .get(entry.offset..end)
            .ok_or_else(|| FormatError::Invalid(format!("{}: offset out of range", entry.name)))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(FormatError::NonFinite { index });
        }
        *slot = Tensor::new(entry.rows, entry.cols, data)
            .map_err(|e| FormatError::Invalid(e.to_string()))?;
    }
    if manifest.vocab.len() != model.config.vocab_size {
        return Err(FormatError::Invalid(format!(
            "vocabulary has {} tokens, model expects {}",
            manifest.vocab.len(),
            model.config.vocab_size
        )));
    }
    Ok(Checkpoint {
        model,
        vocab: manifest.vocab,
    })
}

pub fn save(model: &Model, vocab: &Vocab, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model, vocab)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| CliError::format(path, e))
}
