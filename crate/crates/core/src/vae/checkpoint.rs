//! Versioned binary snapshot of a training run.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"LMAPCKPT" | version u32 | sha256(config) [32] | config len u64 | config TOML
//! | iteration u64 | beta1 product f64 | tensor count u64
//! | per tensor: tag u8 | ndim u32 | dims u64* | f64 data
//! | sha256 of everything above [32]
//! ```
//!
//! Tags: 0 parameter, 1 buffer, 2 first moment, 3 second moment.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::schedule::AdamState;
use super::VaeModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LMAPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum TensorTag {
    Param = 0,
    Buffer = 1,
    FirstMoment = 2,
    SecondMoment = 3,
}

impl TensorTag {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Self::Param,
            1 => Self::Buffer,
            2 => Self::FirstMoment,
            3 => Self::SecondMoment,
            _ => return Err(Error::Checkpoint(format!("unknown tensor tag {v}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub iteration: u64,
    pub beta1_product: f64,
    pub tensors: Vec<(TensorTag, Tensor)>,
}

pub fn config_hash(config: &str) -> [u8; 32] {
    Sha256::digest(config.as_bytes()).into()
}

impl Checkpoint {
    pub fn capture(config: &str, model: &VaeModel, adam: &AdamState) -> Self {
        let mut tensors = Vec::new();
        tensors.extend(model.params().into_iter().map(|p| (TensorTag::Param, p.value.clone())));
        tensors.extend(model.buffers().into_iter().map(|b| (TensorTag::Buffer, b.clone())));
        tensors.extend(adam.first.iter().map(|m| (TensorTag::FirstMoment, m.clone())));
        tensors.extend(adam.second.iter().map(|v| (TensorTag::SecondMoment, v.clone())));
        Self {
            config: config.to_string(),
            iteration: model.iterations,
            beta1_product: adam.beta1_product,
            tensors,
        }
    }

    fn tagged(&self, tag: TensorTag) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().filter(move |(t, _)| *t == tag).map(|(_, x)| x)
    }

    /// Copies the snapshot into a model built from the same configuration.
    pub fn restore(&self, model: &mut VaeModel) -> Result<AdamState> {
        fn fill<'a>(kind: &str, dst: Vec<&mut Tensor>, src: impl Iterator<Item = &'a Tensor>) -> Result<()> {
            let src: Vec<&Tensor> = src.collect();
            if src.len() != dst.len() {
                return Err(Error::Checkpoint(format!(
                    "{kind}: checkpoint has {} tensors, model has {}",
                    src.len(),
                    dst.len()
                )));
            }
            for (i, (d, s)) in dst.into_iter().zip(src).enumerate() {
                if d.shape() != s.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{kind} {i}: shape {:?} does not match model {:?}",
                        s.shape(),
                        d.shape()
                    )));
                }
                *d = s.clone();
            }
            Ok(())
        }
        let mut adam = AdamState::zeros_like(&model.params());
        fill("parameter", model.params_mut().into_iter().map(|p| &mut p.value).collect(), self.tagged(TensorTag::Param))?;
        fill("buffer", model.buffers_mut(), self.tagged(TensorTag::Buffer))?;
        fill("first moment", adam.first.iter_mut().collect(), self.tagged(TensorTag::FirstMoment))?;
        fill("second moment", adam.second.iter_mut().collect(), self.tagged(TensorTag::SecondMoment))?;
        adam.beta1_product = self.beta1_product;
        model.iterations = self.iteration;
        Ok(adam)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&config_hash(&self.config));
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.beta1_product.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (tag, t) in &self.tensors {
            out.push(*tag as u8);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch (truncated or corrupted)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hash = r.take(32)?.to_vec();
        let len = r.u64()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        if hash != config_hash(&config) {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let iteration = r.u64()?;
        let beta1_product = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let count = r.u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let tag = TensorTag::from_u8(r.take(1)?[0])?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((tag, Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Self {
            config,
            iteration,
            beta1_product,
            tensors,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("bin.tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
