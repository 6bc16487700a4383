//! Binary checkpoints.
//!
//! ```text
//! "LCMF" | version u32 | count u32 | count x array
//! array = name_len u16 | name (UTF-8) | dtype u8 (0 f64, 1 f32) | rank u8 | dims u64.. | payload
//! ```
//!
//! All integers and payloads are little-endian; arrays are written in name
//! order so equal parameters always give equal bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LCMF";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DType {
    #[default]
    F64,
    F32,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }
}

pub fn encode(arrays: &[(String, Tensor)], dtype: DType) -> Result<Vec<u8>> {
    let mut sorted: Vec<&(String, Tensor)> = arrays.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let count = u32::try_from(sorted.len()).map_err(|_| Error::Checkpoint("too many arrays".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in sorted {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too high: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype.tag());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => t
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(r.array()?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("bad name: {e}")))?
            .to_string();
        let [tag] = r.array::<1>()?;
        let [rank] = r.array::<1>()?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(r.array()?) as usize);
        }
        let numel: usize = shape.iter().product();
        let data = match tag {
            0 => r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            1 => r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
        };
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn store_arrays(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .sorted_by_name()
        .into_iter()
        .map(|id| (store.get(id).name().to_string(), store.value(id).clone()))
        .collect()
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(&store_arrays(store), DType::F64)?)?;
    Ok(())
}

/// Loads every array of the checkpoint into the same-named parameter.
/// Names and shapes must match exactly.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let arrays = decode(&fs::read(path)?)?;
    if arrays.len() != store.len() {
        return Err(Error::config(format!(
            "checkpoint has {} arrays, model has {}",
            arrays.len(),
            store.len()
        )));
    }
    for (name, t) in arrays {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::config(format!("checkpoint array `{name}` has no parameter")))?;
        if store.value(id).shape() != t.shape() {
            return Err(Error::config(format!(
                "`{name}`: checkpoint shape {:?}, model shape {:?}",
                t.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = t;
    }
    Ok(())
}
