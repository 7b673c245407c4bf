//! Binary tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPLT"  magic
//! u32     format version (1)
//! u32     tensor count
//! per tensor:
//!   u16   name length, then that many bytes of UTF-8 name
//!   u8    dtype tag (0 = f32, 1 = f64)
//!   u8    rank
//!   u64   extent, repeated rank times
//!   raw little-endian values, product(extents) of them
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SPLT";
pub const VERSION: u32 = 1;

/// A tensor as stored on disk, before conversion to a particular precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`; exact when the stored dtype is `T`.
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }
}

/// Ordered list of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push((name.into(), StoredTensor::from_tensor(t)));
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Captures every parameter and buffer of `module`, in visitation order.
    pub fn from_module<T: Scalar, M: Module<T> + ?Sized>(module: &M) -> Self {
        let mut ck = Checkpoint::new();
        module.visit_params(&mut |p| ck.push(p.name.clone(), &p.value));
        module.visit_buffers(&mut |name, t| ck.push(name, t));
        ck
    }

    /// Restores every parameter and buffer of `module`; each must be present
    /// with a matching shape.
    pub fn load_into<T: Scalar, M: Module<T> + ?Sized>(&self, module: &mut M) -> Result<()> {
        let mut err = None;
        let mut fetch = |name: &str, dst: &mut Tensor<T>| {
            if err.is_some() {
                return;
            }
            match self.get(name) {
                None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(s) if s.shape() != dst.shape() => {
                    err = Some(Error::Checkpoint(format!(
                        "tensor {name}: stored shape {:?}, expected {:?}",
                        s.shape(),
                        dst.shape()
                    )))
                }
                Some(s) => *dst = s.to(),
            }
        };
        module.visit_params_mut(&mut |p| fetch(&p.name, &mut p.value));
        module.visit_buffers_mut(&mut |name, t| fetch(name, t));
        err.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype() as u8);
            out.push(t.shape().len() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic (expected SPLT)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: unknown dtype tag {tag}")))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let e = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                shape.push(usize::try_from(e).map_err(|_| Error::Checkpoint("extent overflow".into()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: extent overflow")))?;
            let raw = r.take(
                numel
                    .checked_mul(dtype.size())
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: size overflow")))?,
            )?;
            let bad = |e: Error| Error::Checkpoint(format!("tensor {name}: {e}"));
            let t = match dtype {
                DType::F32 => StoredTensor::F32(
                    Tensor::new(&shape, raw.chunks_exact(4).map(f32::read_le).collect()).map_err(bad)?,
                ),
                DType::F64 => StoredTensor::F64(
                    Tensor::new(&shape, raw.chunks_exact(8).map(f64::read_le).collect()).map_err(bad)?,
                ),
            };
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
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
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}
