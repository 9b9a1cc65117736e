use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ModelConfig, ModelGraph};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BFPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named tensor read from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Serialize every tensor of `store`, buffers included, in store order.
pub fn encode_checkpoint(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(store.len()).map_err(|_| Error::InvalidArgument("too many tensors".into()))?.to_le_bytes());
    for e in store.entries() {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("tensor name too long: {}", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = e.tensor.shape();
        out.push(u8::try_from(shape.len()).map_err(|_| Error::InvalidArgument(format!("rank too large: {}", e.name)))?);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension too large: {}", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.reserve(4 * e.tensor.numel());
        for v in e.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::TruncatedFile);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf: bytes };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::ShapeConflict("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(Error::TruncatedFile)?;
        let raw = r.take(numel.checked_mul(4).ok_or(Error::TruncatedFile)?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        records.push(Record { name, shape, data });
    }
    if !r.buf.is_empty() {
        return Err(Error::ShapeConflict(format!("{} trailing bytes after the last tensor", r.buf.len())));
    }
    Ok(records)
}

/// Copy decoded tensors into `store`, which must hold the same names and shapes
/// in the same order.
pub(crate) fn restore(store: &mut ParamStore, records: Vec<Record>) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::ShapeConflict(format!("checkpoint has {} tensors, model has {}", records.len(), store.len())));
    }
    for (entry, rec) in store.tensors_mut().zip(records) {
        if entry.name != rec.name {
            return Err(Error::ShapeConflict(format!("expected tensor {}, found {}", entry.name, rec.name)));
        }
        if entry.tensor.shape() != rec.shape.as_slice() {
            return Err(Error::ShapeConflict(format!("{}: model shape {:?}, checkpoint shape {:?}", rec.name, entry.tensor.shape(), rec.shape)));
        }
        entry.tensor.data_mut().copy_from_slice(&rec.data);
    }
    Ok(())
}

/// Write the checkpoint next to `path` and rename it into place.
pub fn save_checkpoint(model: &ModelGraph, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model.store())?;
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Build a model from `cfg` and fill it from the checkpoint at `path`.
pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<ModelGraph> {
    let bytes = fs::read(path)?;
    let records = decode_checkpoint(&bytes)?;
    let mut model = ModelGraph::build(cfg)?;
    restore(model.store_mut(), records)?;
    Ok(model)
}
