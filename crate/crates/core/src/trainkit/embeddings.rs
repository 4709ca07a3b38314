//! Per-sample image embeddings for external 2-D projection.
//!
//! Layout follows the dataset file: magic `UAEM0001`, `u32` row count, `u32`
//! dimension, then per row `u8` label, `u8` subtype, `u32` subject id and the
//! vector as little-endian `f64`.

use std::path::Path;

use super::TrainError;
use crate::data::{DataError, Dataset, Label, Subtype};
use crate::encoder::{ClipModel, ModelError};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"UAEM0001";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub label: Label,
    pub subtype: Subtype,
    pub subject_id: u32,
    pub vector: Vec<f64>,
}

pub fn encode_embeddings(rows: &[EmbeddingRow]) -> Vec<u8> {
    let dim = rows.first().map_or(0, |r| r.vector.len());
    let mut buf = Vec::with_capacity(16 + rows.len() * (6 + 8 * dim));
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in rows {
        buf.push(r.label.code());
        buf.push(r.subtype.code());
        buf.extend_from_slice(&r.subject_id.to_le_bytes());
        for v in &r.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Vec<EmbeddingRow>, DataError> {
    if bytes.len() < 8 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(DataError::BadMagic);
    }
    let u32_at = |off: usize| bytes.get(off..off + 4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")));
    let truncated = |offset, found| DataError::Truncated {
        offset,
        declared: 0,
        found,
    };
    let count = u32_at(8).ok_or(truncated(8, 0))? as usize;
    let dim = u32_at(12).ok_or(truncated(12, 0))? as usize;
    let record = 6 + 8 * dim;
    let mut pos = 16;
    let mut rows = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        if bytes.len() < pos + record {
            return Err(DataError::Truncated {
                offset: pos,
                declared: count,
                found: i,
            });
        }
        let label = Label::from_code(bytes[pos]).ok_or(DataError::Field {
            offset: pos,
            what: "label",
        })?;
        let subtype = Subtype::from_code(bytes[pos + 1]).ok_or(DataError::Field {
            offset: pos + 1,
            what: "subtype",
        })?;
        let subject_id = u32_at(pos + 2).expect("bounds checked");
        let vector = bytes[pos + 6..pos + record]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        rows.push(EmbeddingRow {
            label,
            subtype,
            subject_id,
            vector,
        });
        pos += record;
    }
    if pos != bytes.len() {
        return Err(DataError::CountMismatch {
            offset: pos,
            declared: count,
            extra: bytes.len() - pos,
        });
    }
    Ok(rows)
}

/// Embeds every sample of `split` and writes the rows to `path`.
pub fn dump_embeddings(model: &ClipModel<f64>, split: &Dataset, path: &Path) -> Result<Vec<EmbeddingRow>, TrainError> {
    let rows = split
        .samples
        .iter()
        .map(|s| {
            Ok(EmbeddingRow {
                label: s.label,
                subtype: s.subtype,
                subject_id: s.subject_id,
                vector: model.image_embedding(&s.image).map_err(ModelError::from)?,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    std::fs::write(path, encode_embeddings(&rows)).map_err(DataError::from)?;
    Ok(rows)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>, DataError> {
    decode_embeddings(&std::fs::read(path)?)
}
