//! `MCPT1` tensor container.
//!
//! Layout (little-endian): magic `MCPT1`, `u32` entry count, then per entry
//! `u16` name length, UTF-8 name, `u8` dtype code (0 = f32, 1 = f64), `u8`
//! rank, `u64` extents, raw row-major payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 5] = b"MCPT1";

#[derive(Debug, Clone, PartialEq)]
pub enum Stored {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Stored {
    pub fn dtype(&self) -> DType {
        match self {
            Stored::F32(_) => DType::F32,
            Stored::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Stored::F32(t) => t.shape(),
            Stored::F64(t) => t.shape(),
        }
    }

    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            Stored::F32(t) => t.cast(),
            Stored::F64(t) => t.cast(),
        }
    }
}

fn put_payload<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(v.f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.f64().to_le_bytes()),
        }
    }
}

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(store.len()).map_err(|_| Error::Format("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(T::DTYPE.code());
        out.push(u8::try_from(t.rank()).map_err(|_| Error::Format("rank > 255".into()))?);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        put_payload(&mut out, t);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("truncated container at byte {}", self.pos)));
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

/// Decode every entry in file order.
pub fn decode(buf: &[u8]) -> Result<Vec<(String, Stored)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(5)? != MAGIC {
        return Err(Error::Format("bad magic, not an MCPT1 container".into()));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let code = r.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("extent overflow".into()))?);
        }
        let n = numel(&shape);
        let bytes = r.take(n * dtype.size())?;
        let stored = match dtype {
            DType::F32 => Stored::F32(Tensor::new(
                shape,
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            )?),
            DType::F64 => Stored::F64(Tensor::new(
                shape,
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            )?),
        };
        out.push((name, stored));
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, store: &ParamStore<T>) -> Result<()> {
    std::fs::write(path, encode(store)?)?;
    Ok(())
}

/// Load a container, converting every entry to `T`.
pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    let buf = std::fs::read(path)?;
    let mut store = ParamStore::new();
    for (name, s) in decode(&buf)? {
        store.insert(name, s.to());
    }
    Ok(store)
}
