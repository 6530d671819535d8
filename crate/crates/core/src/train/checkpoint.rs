//! Binary named-tensor container.
//!
//! Layout (little-endian): magic `PSPG`, format version `u32`, then per
//! tensor `u16` name length, UTF-8 name, dtype `u8` (0 = f32, 1 = f64),
//! rank `u8`, `u64` dims and the payload; a CRC32 of all preceding bytes
//! closes the file. Tensors are written in name order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PSPG";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

/// Serialises every tensor of `store` with the given payload type. `F32`
/// is lossless only for f32-representable values.
pub fn encode(store: &ParamStore, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in store.iter() {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too large: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(dtype as u8);
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint; every tensor comes back trainable.
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < 12 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("CRC mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut store = ParamStore::new();
    while r.pos < body.len() {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("element count overflow".into()))?;
        let data: Vec<f64> = match dtype {
            0 => r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            1 => r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            d => return Err(Error::Checkpoint(format!("unknown dtype {d} for `{name}`"))),
        };
        if store.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        store.insert(name, Tensor::new(shape, data)?.with_grad());
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, encode(store, Dtype::F64)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

/// `<ckpt>.json`, the config sidecar next to a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_sidecar<T: Serialize>(path: &Path, meta: &T) -> Result<()> {
    fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

pub fn load_sidecar<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let p = sidecar_path(path);
    let text = fs::read_to_string(&p).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Requires every tensor in `expected` to exist in `got` with the same shape.
pub fn check_compatible(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    for (name, t) in expected.iter() {
        let g = got
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("checkpoint lacks `{name}`")))?;
        if g.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for `{name}`: expected {:?}, found {:?}",
                t.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}
