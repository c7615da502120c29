//! Portable binary checkpoints.
//!
//! ```text
//! "PSIDIT01"                      8 bytes
//! count                           u32 LE
//! per tensor, in name order:
//!   name_len u32 LE, name UTF-8, trainable u8 (0/1),
//!   rank u32 LE, dims u64 LE × rank, values f32 LE × product(dims)
//! crc32 of every byte after the magic   u32 LE
//! ```
//! Provenance labels are not stored; loaded tensors carry `checkpoint`.

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"PSIDIT01";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn encode(params: &ParamStore) -> Vec<u8> {
    let mut body = Vec::new();
    body.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.push(p.trainable as u8);
        body.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        body.extend_from_slice(&p.tensor.to_le_bytes());
    }
    let crc = crc32fast::hash(&body);
    let mut out = Vec::with_capacity(MAGIC.len() + body.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore, CheckpointError> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) { CheckpointError::Truncated } else { CheckpointError::BadMagic });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 8 {
        return Err(CheckpointError::Truncated);
    }
    let (body, tail) = rest.split_at(rest.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);

    // Parse first so a cut-off file reports truncation rather than a CRC error.
    let mut r = Reader { buf: body, pos: 0 };
    let parsed = (|| {
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(CheckpointError::Malformed(format!("trainable byte {b}"))),
            };
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| CheckpointError::Truncated)?);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(CheckpointError::Truncated)?;
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let tensor = Tensor::from_vec(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            store
                .insert(name, tensor, trainable, "checkpoint")
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes after the last tensor".into()));
        }
        Ok(store)
    })();
    match parsed {
        Err(CheckpointError::Truncated) if stored != computed => Err(CheckpointError::Truncated),
        _ if stored != computed => Err(CheckpointError::CrcMismatch { stored, computed }),
        other => other,
    }
}

pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}
