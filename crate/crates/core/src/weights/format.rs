use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NTWC";
pub const VERSION: u32 = 1;
/// Magic, version and entry count.
pub const HEADER_LEN: usize = 12;

/// Raw little-endian-decoded payload of one entry.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl WeightData {
    pub fn dtype(&self) -> DType {
        match self {
            WeightData::F32(_) => DType::F32,
            WeightData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            WeightData::F32(v) => v.len(),
            WeightData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bitwise comparison (NaN payloads and signed zeros included).
    pub fn bit_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (WeightData::F32(a), WeightData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (WeightData::F64(a), WeightData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: WeightData,
}

impl WeightEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: WeightData) -> Result<Self> {
        let name = name.into();
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::invalid("weight entry", format!("{name}: element count overflows")))?;
        if numel != data.len() {
            return Err(Error::invalid(
                "weight entry",
                format!("{name}: shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::invalid("weight entry", format!("name of {} bytes too long", name.len())));
        }
        if shape.len() > u8::MAX as usize || shape.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::invalid("weight entry", format!("{name}: shape {shape:?} not representable")));
        }
        Ok(Self { name, shape, data })
    }

    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Result<Self> {
        let data = match T::DTYPE {
            DType::F32 => WeightData::F32(t.data().iter().map(|v| v.to_f64_lossy() as f32).collect()),
            DType::F64 => WeightData::F64(t.data().iter().map(|v| v.to_f64_lossy()).collect()),
        };
        Self::new(name, t.shape().to_vec(), data)
    }

    /// Converts to a tensor of `T`, rounding if the stored precision is wider.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match &self.data {
            WeightData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            WeightData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
        };
        Tensor::new(&self.shape, data)
    }

    fn encoded_len(&self) -> usize {
        2 + self.name.len() + 1 + 4 * self.shape.len() + 1 + self.data.len() * self.data.dtype().size()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.name == other.name && self.shape == other.shape && self.data.bit_eq(&other.data)
    }
}

/// Ordered, uniquely named tensors in the NTWC layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightContainer {
    entries: Vec<WeightEntry>,
    index: HashMap<String, usize>,
}

impl WeightContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: WeightEntry) -> Result<()> {
        if self.index.contains_key(&entry.name) {
            return Err(Error::invalid("weight container", format!("duplicate name {:?}", entry.name)));
        }
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[WeightEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&WeightEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.len() == other.len() && self.entries.iter().zip(&other.entries).all(|(a, b)| a.bit_eq(b))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let total = HEADER_LEN + self.entries.iter().map(WeightEntry::encoded_len).sum::<usize>();
        let mut out = Vec::with_capacity(total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(e.data.dtype().tag());
            match &e.data {
                WeightData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                WeightData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        debug_assert_eq!(out.len(), total);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic {magic:02x?}"),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("unsupported version {version}"),
            });
        }
        let count = r.u32("entry count")?;
        let mut out = Self::new();
        for i in 0..count {
            let start = r.pos;
            let name_len = r.u16("name length")? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format {
                    offset: name_at,
                    detail: format!("entry {i}: name is not UTF-8"),
                })?
                .to_string();
            if out.index.contains_key(&name) {
                return Err(Error::Format {
                    offset: start,
                    detail: format!("duplicate name {name:?}"),
                });
            }
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let tag_at = r.pos;
            let tag = r.u8("dtype")?;
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format {
                offset: tag_at,
                detail: format!("{name}: unknown dtype tag {tag}"),
            })?;
            let payload_at = r.pos;
            let nbytes = shape
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= r.remaining())
                .ok_or_else(|| Error::Format {
                    offset: payload_at,
                    detail: format!("{name}: payload for shape {shape:?} exceeds {} remaining bytes", r.remaining()),
                })?;
            let raw = r.take(nbytes, "payload")?;
            let data = match dtype {
                DType::F32 => WeightData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                DType::F64 => WeightData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
            };
            out.index.insert(name.clone(), out.entries.len());
            out.entries.push(WeightEntry { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Format {
                offset: r.pos,
                detail: format!("{} trailing bytes after last entry", r.remaining()),
            });
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        sink.write_all(&self.to_bytes())
    }

    pub fn read_from<R: Read>(mut source: R) -> Result<Self> {
        let mut buf = Vec::new();
        source
            .read_to_end(&mut buf)
            .map_err(|e| Error::Import(format!("read failed: {e}")))?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format {
                offset: self.pos,
                detail: format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
