use std::io::{Read, Write};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::{KernelError, Result};

const MAGIC: &[u8; 4] = b"TSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Fixed header fields plus free-form metadata (JSON by convention).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub dim: u32,
    pub vocab_size: u32,
    pub metadata: String,
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn small(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| KernelError::Format(format!("{what} too large")))
}

/// Layout: magic, version, dim, vocab size, metadata, tensor count, then per
/// tensor its name, rows, cols and row-major little-endian f32 values.
pub fn save_checkpoint<W: Write>(mut w: W, header: &CheckpointHeader, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, CHECKPOINT_VERSION)?;
    put_u32(&mut w, header.dim)?;
    put_u32(&mut w, header.vocab_size)?;
    put_u32(&mut w, small(header.metadata.len(), "metadata")?)?;
    w.write_all(header.metadata.as_bytes())?;
    put_u32(&mut w, small(store.len(), "tensor count")?)?;
    for id in store.ids() {
        let name = store.name(id);
        let t = store.value(id);
        put_u32(&mut w, small(name.len(), "name")?)?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, small(t.rows(), "rows")?)?;
        put_u32(&mut w, small(t.cols(), "cols")?)?;
        let mut buf = Vec::with_capacity(t.data().len() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(mut r: R) -> Result<(CheckpointHeader, ParamStore)> {
    let magic = get_bytes(&mut r, 4)?;
    if magic != MAGIC {
        return Err(KernelError::Format("not a checkpoint file".into()));
    }
    let version = get_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(KernelError::Format(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let dim = get_u32(&mut r)?;
    let vocab_size = get_u32(&mut r)?;
    let mlen = get_u32(&mut r)? as usize;
    let metadata = String::from_utf8(get_bytes(&mut r, mlen)?)
        .map_err(|_| KernelError::Format("metadata is not UTF-8".into()))?;
    let count = get_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = get_u32(&mut r)? as usize;
        let name = String::from_utf8(get_bytes(&mut r, nlen)?)
            .map_err(|_| KernelError::Format("tensor name is not UTF-8".into()))?;
        let rows = get_u32(&mut r)? as usize;
        let cols = get_u32(&mut r)? as usize;
        let raw = get_bytes(&mut r, rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.add(&name, Tensor::new(rows, cols, data)?)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(KernelError::Format("trailing bytes after last tensor".into()));
    }
    Ok((
        CheckpointHeader {
            dim,
            vocab_size,
            metadata,
        },
        store,
    ))
}
