//! Binary tensor-record files.
//!
//! Layout: magic `PNET`, then a u32 little-endian format version, then
//! records until end of file. Each record is
//! `name_len: u64 LE | name: UTF-8 | rank: u64 LE | extents: rank x u64 LE |
//! values: prod(extents) x f64 LE`.
//!
//! The same container backs model checkpoints, precomputed query-set files,
//! and prediction mask dumps. Round-trips are bit-exact because f64 payloads
//! are stored as raw IEEE-754 bits.

use super::optim::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PNET";
pub const VERSION: u32 = 1;

const MAX_NAME_LEN: u64 = 1 << 12;
const MAX_RANK: u64 = 8;
const MAX_NUMEL: u64 = 1 << 32;

/// Streams `(name, tensor)` records into a fresh file.
pub fn write_records<'a>(
    path: &Path,
    records: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for (name, tensor) in records {
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(tensor.rank() as u64).to_le_bytes())?;
        for &e in tensor.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Reader<'p> {
    path: &'p Path,
    buf: Vec<u8>,
    pos: usize,
}

impl<'p> Reader<'p> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::BinaryFormat {
            path: self.path.display().to_string(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail(format!(
                "truncated while reading {what} ({n} bytes wanted, {} left)",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64_le(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Reads every record in file order.
pub fn read_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { path, buf, pos: 0 };

    let magic = r.take(4, "magic")?.to_vec();
    if magic != MAGIC {
        return Err(r.fail(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }

    let mut records = Vec::new();
    while r.pos < r.buf.len() {
        let name_len = r.u64_le("name length")?;
        if name_len > MAX_NAME_LEN {
            return Err(r.fail(format!("name length {name_len} exceeds limit")));
        }
        let name_bytes = r.take(name_len as usize, "name")?.to_vec();
        let name = String::from_utf8(name_bytes)
            .map_err(|e| r.fail(format!("name is not UTF-8: {e}")))?;
        let rank = r.u64_le("rank")?;
        if rank > MAX_RANK {
            return Err(r.fail(format!("rank {rank} exceeds limit")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let e = r.u64_le("extent")?;
            numel = numel.saturating_mul(e.max(1));
            shape.push(e as usize);
        }
        if numel > MAX_NUMEL {
            return Err(r.fail(format!("element count {numel} exceeds limit")));
        }
        let count: usize = shape.iter().product();
        let bytes = r.take(count * 8, "values")?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, Tensor::from_parts(shape, data)));
    }
    Ok(records)
}

/// Writes every parameter of the store, in registration order.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    write_records(
        path,
        store
            .entries
            .iter()
            .map(|e| (e.name.as_str(), &e.value)),
    )
}

/// Loads parameter values into an existing store. The file must contain
/// exactly the store's parameters, in order, with matching extents.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let records = read_records(path)?;
    if records.len() != store.len() {
        return Err(Error::config(format!(
            "checkpoint {} holds {} parameters, model expects {}",
            path.display(),
            records.len(),
            store.len()
        )));
    }
    for (id, (name, tensor)) in store.ids().zip(records.into_iter()) {
        if store.name(id) != name {
            return Err(Error::config(format!(
                "checkpoint parameter {name} does not match model parameter {}",
                store.name(id)
            )));
        }
        if store.value(id).shape() != tensor.shape() {
            return Err(Error::shape(
                "load_checkpoint",
                format!(
                    "{name}: file extents {:?} vs model extents {:?}",
                    tensor.shape(),
                    store.value(id).shape()
                ),
            ));
        }
        if !tensor.is_finite() {
            return Err(Error::NonFinite(format!("checkpoint parameter {name}")));
        }
        store.set_value(id, tensor)?;
    }
    Ok(())
}
