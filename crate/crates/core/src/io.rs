//! Named-tensor record files shared by checkpoints and dataset samples.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, 32-byte config
//! digest, `u32` entry count, then per entry a `u16`-prefixed UTF-8 name, a
//! dtype byte, a `u8` rank, `u32` dims and the raw element bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn new(name: &str, shape: &[usize], data: TensorData) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Invalid(format!("tensor {name}: shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub magic: [u8; 8],
    pub digest: [u8; 32],
    pub tensors: Vec<NamedTensor>,
}

impl TensorRecord {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.tag());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(bad("truncated"));
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        let magic: [u8; 8] = take(8)?.try_into().expect("8 bytes");
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let digest: [u8; 32] = take(32)?.try_into().expect("32 bytes");
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(take(len)?).map_err(|_| bad("tensor name is not UTF-8"))?.to_string();
            let tag = take(1)?[0];
            let rank = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize);
            }
            let n: usize = shape.iter().product();
            let data = match tag {
                0 => TensorData::F32(take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()),
                1 => TensorData::F64(take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()),
                2 => TensorData::U8(take(n)?.to_vec()),
                _ => return Err(bad(&format!("unknown dtype tag {tag} for {name}"))),
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { magic, digest, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let rec = Self::from_bytes(&bytes, path)?;
        if &rec.magic != magic {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("bad magic {:?}", String::from_utf8_lossy(&rec.magic)),
            });
        }
        Ok(rec)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of `text`.
pub fn digest(text: &str) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(text.as_bytes()).into()
}
