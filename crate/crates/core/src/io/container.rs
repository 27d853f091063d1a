//! Little-endian tensor container:
//!
//! ```text
//! magic "LCDTENS\0" | version u32 | count u32
//! per tensor: name_len u32 | name utf-8 | rank u32 | dims u64 * rank | dtype u8 | data
//! trailer: sha256 of every preceding byte (32 bytes)
//! ```
//!
//! dtype codes: 1 = f64, 2 = i64, 3 = u8.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LCDTENS\0";
pub const CONTAINER_VERSION: u32 = 1;
const HASH_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn code(&self) -> u8 {
        match self {
            Self::F64(_) => 1,
            Self::I64(_) => 2,
            Self::U8(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F64(v) => v.len(),
            Self::I64(v) => v.len(),
            Self::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let name = name.into();
        let expected: u64 = dims.iter().product();
        if expected != data.len() as u64 {
            return Err(Error::Shape(format!("tensor {name}: dims {dims:?} hold {expected} values, got {}", data.len())));
        }
        Ok(Self { name, dims, data })
    }

    pub fn f64s(&self) -> Result<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            _ => Err(Error::Format(format!("tensor {} is not f64", self.name))),
        }
    }

    pub fn i64s(&self) -> Result<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Ok(v),
            _ => Err(Error::Format(format!("tensor {} is not i64", self.name))),
        }
    }

    pub fn bytes(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            _ => Err(Error::Format(format!("tensor {} is not u8", self.name))),
        }
    }
}

pub fn encode(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(t.data.code());
        match &t.data {
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }
    let hash = Sha256::digest(&out);
    out.extend_from_slice(&hash);
    out
}

/// Hex content hash stored in the trailer.
pub fn file_hash(bytes: &[u8]) -> Result<String> {
    if bytes.len() < HASH_LEN {
        return Err(Error::Format("file too short for a hash trailer".into()));
    }
    Ok(hex::encode(&bytes[bytes.len() - HASH_LEN..]))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format("truncated container".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>> {
    if bytes.len() < MAGIC.len() + 8 + HASH_LEN {
        return Err(Error::Format("file too short for a tensor container".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - HASH_LEN);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Format("content hash mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Format("tensor name is not utf-8".into()))?.to_owned();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let n = usize::try_from(n).map_err(|_| Error::Format("tensor too large".into()))?;
        let code = r.take(1)?[0];
        let data = match code {
            1 => TensorData::F64(r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
            2 => TensorData::I64(r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
            3 => TensorData::U8(r.take(n)?.to_vec()),
            other => return Err(Error::Format(format!("unknown dtype code {other}"))),
        };
        tensors.push(Tensor { name, dims, data });
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(tensors)
}
