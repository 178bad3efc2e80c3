//! Flat binary container of named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "GDCUNET\0"
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON
//! count        u32
//! count × {
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   dtype      u8       0 = f32, 1 = f64
//!   rank       u8       always 4
//!   dims       4 × u64  B, H, W, C
//!   data       B·H·W·C elements, row-major, little-endian
//! }
//! ```
//!
//! Tensors are written in parameter-store order, so the bytes of a
//! container depend only on its contents.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"GDCUNET\0";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes a header and every tensor of `store`.
pub fn encode<T: Scalar>(header: &Value, store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(store.numel() * T::DTYPE.byte_width() + 1024);
    out.extend_from_slice(MAGIC);
    let h = serde_json::to_vec(header)?;
    put_u32(&mut out, h.len())?;
    out.extend_from_slice(&h);
    put_u32(&mut out, store.len())?;
    for p in store.iter() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(4);
        for d in p.value.shape().0 {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated container at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("dimension {v} too large")))
    }
}

fn read_elements<T: Scalar>(raw: &[u8], dtype: DType) -> Vec<T> {
    match dtype {
        d if d == T::DTYPE => raw.chunks_exact(d.byte_width()).map(T::read_le).collect(),
        DType::F32 => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    }
}

/// Parses a container; tensors stored in another precision are converted.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Value, ParamStore<T>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Format("bad magic; not a parameter container".into()));
    }
    let hlen = c.u32()?;
    let header: Value = serde_json::from_slice(c.take(hlen)?)?;
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = c.u32()?;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let code = c.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        let rank = c.u8()?;
        if rank != 4 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}, expected 4")));
        }
        let dims = [c.u64()?, c.u64()?, c.u64()?, c.u64()?];
        let shape = Shape(dims);
        let nbytes = shape
            .numel()
            .checked_mul(dtype.byte_width())
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let data = read_elements(c.take(nbytes)?, dtype);
        if store.find(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        store.add(name, Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((header, store))
}

pub fn write<T: Scalar>(mut w: impl Write, header: &Value, store: &ParamStore<T>) -> Result<()> {
    w.write_all(&encode(header, store)?)?;
    Ok(())
}

pub fn read<T: Scalar>(mut r: impl Read) -> Result<(Value, ParamStore<T>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, header: &Value, store: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode(header, store)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<(Value, ParamStore<T>)> {
    decode(&fs::read(path)?)
}
