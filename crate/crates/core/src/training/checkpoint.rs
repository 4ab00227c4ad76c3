//! Binary checkpoint container.
//!
//! Little-endian layout: magic `EMOSTYLE1`, `u32` version, `u64` tensor
//! count, then per tensor a `u16` name length, the UTF-8 name, a `u8` dtype
//! (0 = f32, 1 = f64), a `u8` rank, `u64` dims and the row-major payload.
//! The last tensor, `meta.checksum`, holds the SHA-256 of every preceding
//! byte as eight 32-bit words stored in f64.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::numerics::{Real, Tensor};

pub const MAGIC: &[u8; 9] = b"EMOSTYLE1";
pub const VERSION: u32 = 1;
pub const CHECKSUM: &str = "meta.checksum";

#[derive(Clone, Debug, PartialEq)]
pub enum Stored {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Stored {
    pub fn shape(&self) -> &[usize] {
        match self {
            Stored::F32(t) => t.shape(),
            Stored::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested precision.
    pub fn to<T: Real>(&self) -> Tensor<T> {
        match self {
            Stored::F32(t) => t.cast(),
            Stored::F64(t) => t.cast(),
        }
    }
}

/// Converts a generic tensor into its stored form.
pub fn store<T: Real>(t: &Tensor<T>) -> Stored {
    match T::DTYPE {
        0 => Stored::F32(t.cast()),
        _ => Stored::F64(t.cast()),
    }
}

/// Ordered named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Stored)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Stored) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Stored> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()).into())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.tensors
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(move |n| n.starts_with(prefix))
    }

    /// Tensor `name` checked against an expected shape.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&Stored> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape().to_vec(),
            }
            .into());
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64 + 1).to_le_bytes());
        for (name, t) in &self.tensors {
            write_tensor(&mut out, name, t);
        }
        let digest = Sha256::digest(&out);
        let words: Vec<f64> = digest
            .chunks(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        write_tensor(
            &mut out,
            CHECKSUM,
            &Stored::F64(Tensor::from_f64(&[8], &words).expect("checksum shape")),
        );
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = u32::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return Err(CheckpointError::Version(version).into());
        }
        let count = u64::from_le_bytes(r.array("tensor count")?);
        let mut tensors = Vec::new();
        for i in 0..count {
            let start = r.pos;
            let (name, t) = read_tensor(&mut r, i)?;
            if name == CHECKSUM {
                let digest = Sha256::digest(&bytes[..start]);
                let expected: Vec<f64> = digest
                    .chunks(4)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect();
                match &t {
                    Stored::F64(c) if c.data() == expected.as_slice() && i + 1 == count => {}
                    _ => return Err(CheckpointError::Integrity(CHECKSUM.into()).into()),
                }
                if r.pos != bytes.len() {
                    return Err(CheckpointError::Malformed("trailing bytes".into()).into());
                }
                return Ok(Checkpoint { tensors });
            }
            tensors.push((name, t));
        }
        Err(CheckpointError::Missing(CHECKSUM.into()).into())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Stored) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let (dtype, shape) = match t {
        Stored::F32(t) => (0u8, t.shape()),
        Stored::F64(t) => (1u8, t.shape()),
    };
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t {
        Stored::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
        Stored::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what.to_string()).into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

fn read_tensor(r: &mut Reader<'_>, index: u64) -> Result<(String, Stored)> {
    let label = format!("tensor #{index}");
    let len = u16::from_le_bytes(r.array(&label)?) as usize;
    let name = std::str::from_utf8(r.take(len, &label)?)
        .map_err(|_| CheckpointError::Malformed(label.clone()))?
        .to_string();
    let [dtype] = r.array::<1>(&name)?;
    let [rank] = r.array::<1>(&name)?;
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(r.array(&name)?) as usize);
    }
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = n.ok_or_else(|| CheckpointError::Malformed(name.clone()))?;
    let stored = match dtype {
        0 => {
            let bytes = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| CheckpointError::Malformed(name.clone()))?,
                &name,
            )?;
            let data = bytes.chunks(4).map(f32::read_le).collect();
            Stored::F32(
                Tensor::new(&shape, data).map_err(|_| CheckpointError::Malformed(name.clone()))?,
            )
        }
        1 => {
            let bytes = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| CheckpointError::Malformed(name.clone()))?,
                &name,
            )?;
            let data = bytes.chunks(8).map(f64::read_le).collect();
            Stored::F64(
                Tensor::new(&shape, data).map_err(|_| CheckpointError::Malformed(name.clone()))?,
            )
        }
        d => return Err(CheckpointError::DType(d).into()),
    };
    Ok((name, stored))
}

/// Packs integers exactly into f64 as 32-bit halves, low word first.
pub fn pack_u64s(values: &[u64]) -> Tensor<f64> {
    let data: Vec<f64> = values
        .iter()
        .flat_map(|&v| [(v & 0xffff_ffff) as f64, (v >> 32) as f64])
        .collect();
    Tensor::from_f64(&[data.len()], &data).expect("non-empty")
}

pub fn unpack_u64s(t: &Stored, name: &str) -> Result<Vec<u64>> {
    let Stored::F64(t) = t else {
        return Err(CheckpointError::Malformed(name.to_string()).into());
    };
    let d = t.data();
    if d.len() % 2 != 0
        || d.iter()
            .any(|&v| v < 0.0 || v > u32::MAX as f64 || v.fract() != 0.0)
    {
        return Err(CheckpointError::Malformed(name.to_string()).into());
    }
    Ok(d.chunks(2)
        .map(|c| c[0] as u64 | ((c[1] as u64) << 32))
        .collect())
}

/// Text stored as one f32 per byte.
pub fn pack_text(s: &str) -> Tensor<f32> {
    let data: Vec<f32> = s.bytes().map(|b| b as f32).collect();
    if data.is_empty() {
        return Tensor::zeros(&[1]);
    }
    Tensor::new(&[data.len()], data).expect("non-empty")
}

pub fn unpack_text(t: &Stored, name: &str) -> Result<String> {
    let Stored::F32(t) = t else {
        return Err(CheckpointError::Malformed(name.to_string()).into());
    };
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| v as u8)
        .filter(|&b| b != 0)
        .collect();
    String::from_utf8(bytes).map_err(|_| CheckpointError::Malformed(name.to_string()).into())
}
