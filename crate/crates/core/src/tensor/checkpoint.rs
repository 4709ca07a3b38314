//! Binary parameter checkpoint.
//!
//! Layout: magic `LSMT0001`, then per parameter until end of file:
//! `u32` name length, UTF-8 name, `u32` rank, `u32` per extent, then the
//! values as little-endian `f64`. All integers are little-endian.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{ParamStore, Tensor};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LSMT0001";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint magic at offset 0")]
    BadMagic,
    #[error("checkpoint truncated at offset {offset}")]
    Truncated { offset: usize },
    #[error("invalid parameter name at offset {offset}")]
    BadName { offset: usize },
}

pub fn write_checkpoint<S: Scalar, W: Write>(store: &ParamStore<S>, mut w: W) -> io::Result<()> {
    let mut buf = Vec::with_capacity(8 + store.num_scalars() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for (name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated { offset: self.pos }),
        }
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint<S: Scalar, R: Read>(mut r: R) -> Result<ParamStore<S>, CheckpointError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut cur = Cursor { bytes: &bytes, pos: 8 };
    let mut store = ParamStore::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u32()? as usize;
        let name_at = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| CheckpointError::BadName { offset: name_at })?
            .to_string();
        if store.id(&name).is_some() {
            return Err(CheckpointError::BadName { offset: name_at });
        }
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = cur.take(count.checked_mul(8).ok_or(CheckpointError::Truncated { offset: cur.pos })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        store.add(name, Tensor::new(&shape, data).expect("count matches shape"));
    }
    Ok(store)
}
