//! `CFD1` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CFD1" | version u16 | entry count u32
//! per entry: name length u16 | UTF-8 name | dtype u8 (0 = f32, 1 = u8) | rank u8 |
//!            dims u64 × rank | row-major payload
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, ImageTensor};

pub const MAGIC: &[u8; 4] = b"CFD1";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::U8),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u64>,
    /// Raw little-endian payload.
    pub payload: Vec<u8>,
}

impl Entry {
    pub fn numel(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<Entry>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("container has no entry {name:?}")))
    }

    pub fn push(&mut self, entry: Entry) -> Result<()> {
        if entry.name.len() > u16::MAX as usize {
            return Err(Error::Format("entry name too long".into()));
        }
        if entry.dims.len() > u8::MAX as usize {
            return Err(Error::Format("entry rank too large".into()));
        }
        if self.get(&entry.name).is_some() {
            return Err(Error::Format(format!("duplicate entry name {:?}", entry.name)));
        }
        if entry.payload.len() != entry.numel() * entry.dtype.size() {
            return Err(Error::Format(format!(
                "entry {:?}: payload of {} bytes does not match dims {:?}",
                entry.name,
                entry.payload.len(),
                entry.dims
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn push_f32(&mut self, name: &str, dims: &[usize], values: &[f32]) -> Result<()> {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(Entry {
            name: name.to_string(),
            dtype: DType::F32,
            dims: dims.iter().map(|&d| d as u64).collect(),
            payload,
        })
    }

    pub fn push_u8(&mut self, name: &str, dims: &[usize], values: Vec<u8>) -> Result<()> {
        self.push(Entry {
            name: name.to_string(),
            dtype: DType::U8,
            dims: dims.iter().map(|&d| d as u64).collect(),
            payload: values,
        })
    }

    pub fn push_image(&mut self, name: &str, t: &ImageTensor) -> Result<()> {
        self.push_f32(name, &t.shape(), t.data())
    }

    pub fn push_masks(&mut self, name: &str, masks: &[BinaryMask]) -> Result<()> {
        let (h, w) = masks.first().map(|m| (m.height(), m.width())).unwrap_or((0, 0));
        let mut data = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::invalid("masks of differing sizes"));
            }
            data.extend_from_slice(m.data());
        }
        self.push_u8(name, &[masks.len(), h, w], data)
    }

    pub fn f32_values(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let e = self.entry(name)?;
        if e.dtype != DType::F32 {
            return Err(Error::Format(format!("entry {name:?} is not f32")));
        }
        let vals = e
            .payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((e.dims.iter().map(|&d| d as usize).collect(), vals))
    }

    pub fn u8_values(&self, name: &str) -> Result<(Vec<usize>, &[u8])> {
        let e = self.entry(name)?;
        if e.dtype != DType::U8 {
            return Err(Error::Format(format!("entry {name:?} is not u8")));
        }
        Ok((e.dims.iter().map(|&d| d as usize).collect(), &e.payload))
    }

    pub fn image(&self, name: &str) -> Result<ImageTensor> {
        let (dims, vals) = self.f32_values(name)?;
        let shape: [usize; 4] = dims
            .try_into()
            .map_err(|d| Error::Format(format!("entry {name:?} has rank {:?}, expected 4", d)))?;
        ImageTensor::new(shape, vals)
    }

    pub fn masks(&self, name: &str) -> Result<Vec<BinaryMask>> {
        let (dims, vals) = self.u8_values(name)?;
        let [n, h, w]: [usize; 3] = dims
            .try_into()
            .map_err(|_| Error::Format(format!("entry {name:?} is not a [N, H, W] mask stack")))?;
        (0..n)
            .map(|i| BinaryMask::new(h, w, vals[i * h * w..(i + 1) * h * w].to_vec()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.code());
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&e.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a CFD1 container".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut names = HashSet::new();
        let mut c = TensorContainer::new();
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate entry name {name:?}")));
            }
            let dtype = DType::from_code(r.array::<1>()?[0])?;
            let rank = r.array::<1>()?[0] as usize;
            let dims = (0..rank)
                .map(|_| r.array().map(u64::from_le_bytes))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format("dims overflow".into()))?;
            let len = (numel as usize)
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format("payload overflow".into()))?;
            let payload = r.take(len)?.to_vec();
            c.push(Entry {
                name,
                dtype,
                dims,
                payload,
            })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let s = self.take(N)?;
        let mut a = [0u8; N];
        a.copy_from_slice(s);
        Ok(a)
    }
}
