//! `DCLW` weights container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "DCLW"
//! version    u32      currently 1
//! count      u32      number of entries
//! entry*     count times:
//!   name_len u16, name (UTF-8)
//!   dtype    u8       1 = f64, 2 = f32, 3 = u8 bytes
//!   rank     u8
//!   dims     u64 × rank
//!   payload  product(dims) elements, little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DCLW";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum WeightData {
    F64(Tensor),
    F32 { shape: Vec<usize>, data: Vec<f32> },
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub data: WeightData,
}

impl WeightEntry {
    pub fn tensor(name: impl Into<String>, t: Tensor) -> Self {
        Self { name: name.into(), data: WeightData::F64(t) }
    }

    pub fn bytes(name: impl Into<String>, b: Vec<u8>) -> Self {
        Self { name: name.into(), data: WeightData::Bytes(b) }
    }
}

fn malformed(message: impl Into<String>) -> Error {
    Error::Format { what: "DCLW weights", message: message.into() }
}

pub fn encode(entries: &[WeightEntry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(entries.len()).map_err(|_| malformed("too many entries"))?.to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| malformed(format!("name too long: {}", e.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let (dtype, shape): (u8, Vec<usize>) = match &e.data {
            WeightData::F64(t) => (1, t.shape().to_vec()),
            WeightData::F32 { shape, .. } => (2, shape.clone()),
            WeightData::Bytes(b) => (3, vec![b.len()]),
        };
        out.push(dtype);
        out.push(u8::try_from(shape.len()).map_err(|_| malformed("rank above 255"))?);
        for d in &shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        match &e.data {
            WeightData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            WeightData::F32 { shape, data } => {
                if shape.iter().product::<usize>() != data.len() {
                    return Err(malformed(format!("entry {} payload does not match shape", e.name)));
                }
                data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
            WeightData::Bytes(b) => out.extend_from_slice(b),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| {
            malformed(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<WeightEntry>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = u32::from_le_bytes(c.array()?);
    if version != VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(c.array()?) as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(c.array()?) as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| malformed("entry name is not UTF-8"))?;
        let [dtype] = c.array()?;
        let [rank] = c.array()?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(usize::try_from(u64::from_le_bytes(c.array()?)).map_err(|_| malformed("dimension overflow"))?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| malformed(format!("entry {name}: element count overflow")))?;
        let data = match dtype {
            1 => {
                let raw = c.take(count.checked_mul(8).ok_or_else(|| malformed("size overflow"))?)?;
                let v = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                WeightData::F64(Tensor::new(shape, v)?)
            }
            2 => {
                let raw = c.take(count.checked_mul(4).ok_or_else(|| malformed("size overflow"))?)?;
                let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
                WeightData::F32 { shape, data }
            }
            3 => WeightData::Bytes(c.take(count)?.to_vec()),
            other => return Err(malformed(format!("entry {name}: unknown dtype {other}"))),
        };
        entries.push(WeightEntry { name, data });
    }
    if c.pos != buf.len() {
        return Err(malformed(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[WeightEntry]) -> Result<()> {
    let bytes = encode(entries)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<WeightEntry>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
