// SPDX-License-Identifier: MIT OR Apache-2.0

//! ATRW tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ATRW" | u32 version = 1 | u32 tensor_count
//! per tensor: u16 name_len | name (UTF-8) | u8 rank | u64 extents[rank]
//! payloads: f32 LE values in table order, each starting on a 64-byte boundary
//! ```
//!
//! Padding bytes are zero, so writing the same tensors always yields the same
//! bytes.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::TensorF32;

pub const MAGIC: &[u8; 4] = b"ATRW";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

/// An ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub tensors: Vec<(String, TensorF32)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: TensorF32) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&TensorF32> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Result<TensorF32> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
        Ok(self.tensors.remove(pos).1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::Format(format!("tensor `{name}` rank too large")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(rank);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            pad_to(&mut out, ALIGN);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                expected: VERSION,
                found: version,
            });
        }
        let count = r.u32("tensor count")? as usize;
        let mut table = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::Format(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let e = r.u64("extent")?;
                shape.push(usize::try_from(e).map_err(|_| {
                    Error::Format(format!("tensor `{name}` extent {e} overflows"))
                })?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| {
                    Error::Format(format!("tensor `{name}` shape {shape:?} inconsistent with file size"))
                })?;
            table.push((name, shape, numel));
        }
        let mut tensors = Vec::with_capacity(table.len());
        for (name, shape, numel) in table {
            r.align(ALIGN, &name)?;
            let raw = r.take(numel * 4, &format!("payload of `{name}`"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, TensorF32::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn pad_to(out: &mut Vec<u8>, align: usize) {
    let rem = out.len() % align;
    if rem != 0 {
        out.resize(out.len() + align - rem, 0);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("reading {what} at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn align(&mut self, align: usize, name: &str) -> Result<()> {
        let rem = self.pos % align;
        if rem != 0 {
            let pad = self.take(align - rem, &format!("padding before `{name}`"))?;
            if pad.iter().any(|&b| b != 0) {
                return Err(Error::Format(format!("non-zero padding before `{name}`")));
            }
        }
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
