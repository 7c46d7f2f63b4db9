//! Binary checkpoint container.
//!
//! ```text
//! magic[4] version:u32 precision_bits:u32
//! meta_len:u64 meta(JSON)
//! tensor_count:u32 { name_len:u32 name kind:u8 rank:u32 dims:u64* data }
//! adam_count:u32   { name_len:u32 name step:u64 beta1 beta2 eps:f64 len:u64 m v }
//! ```
//!
//! All integers and values are little-endian; tensor and moment values are
//! stored at the run's precision, so a round trip is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::engine::{AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};
use crate::models::{Optimizer, ParamKind, ParamSet};
use crate::scalar::{Precision, Scalar};

pub const FORMAT_VERSION: u32 = 1;
/// Magic of generator/discriminator training checkpoints.
pub const MODEL_MAGIC: [u8; 4] = *b"T2FG";
/// Magic of probe classifier files.
pub const CLASSIFIER_MAGIC: [u8; 4] = *b"T2FC";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<S> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedAdam<S> {
    pub name: String,
    pub state: AdamState<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub magic: [u8; 4],
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor<S>>,
    pub adam: Vec<NamedAdam<S>>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(magic: [u8; 4], meta: &impl Serialize) -> Result<Self> {
        let meta = serde_json::to_value(meta).map_err(|e| Error::contract(format!("checkpoint metadata: {e}")))?;
        Ok(Checkpoint {
            magic,
            meta,
            tensors: Vec::new(),
            adam: Vec::new(),
        })
    }

    pub fn meta_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone()).map_err(|e| Error::contract(format!("checkpoint metadata: {e}")))
    }

    /// Appends every tensor of `params` and, when given, the matching Adam states.
    pub fn add_params(&mut self, params: &ParamSet<S>, opt: Option<&Optimizer<S>>) {
        for p in params.iter() {
            self.tensors.push(NamedTensor {
                name: p.name.clone(),
                kind: p.kind,
                tensor: p.tensor.clone(),
            });
        }
        if let Some(opt) = opt {
            for (p, st) in params.iter().zip(&opt.states) {
                if let Some(st) = st {
                    self.adam.push(NamedAdam {
                        name: p.name.clone(),
                        state: st.clone(),
                    });
                }
            }
        }
    }

    /// Overwrites `params` (and `opt`) from the stored tensors of the same names.
    pub fn restore_params(&self, params: &mut ParamSet<S>, opt: Option<&mut Optimizer<S>>) -> Result<()> {
        for p in params.iter_mut() {
            let stored = self
                .tensors
                .iter()
                .find(|t| t.name == p.name)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks tensor {}", p.name)))?;
            if stored.kind != p.kind || stored.tensor.shape() != p.tensor.shape() {
                return Err(Error::contract(format!(
                    "checkpoint tensor {} has shape {:?}, model expects {:?}",
                    p.name,
                    stored.tensor.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = stored.tensor.clone();
        }
        if let Some(opt) = opt {
            for (p, st) in params.iter().zip(opt.states.iter_mut()) {
                let Some(st) = st else { continue };
                let stored = self
                    .adam
                    .iter()
                    .find(|a| a.name == p.name)
                    .ok_or_else(|| Error::contract(format!("checkpoint lacks Adam state for {}", p.name)))?;
                if stored.state.m.len() != st.m.len() {
                    return Err(Error::contract(format!("Adam state for {} has the wrong length", p.name)));
                }
                *st = stored.state.clone();
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&S::PRECISION.bits().to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("JSON values serialize");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            write_name(&mut out, &t.name);
            out.push(match t.kind {
                ParamKind::Weight => 0,
                ParamKind::Buffer => 1,
            });
            out.extend_from_slice(&(t.tensor.shape().len() as u32).to_le_bytes());
            for &d in t.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            t.tensor.data().iter().for_each(|v| v.write_le(&mut out));
        }
        out.extend_from_slice(&(self.adam.len() as u32).to_le_bytes());
        for a in &self.adam {
            write_name(&mut out, &a.name);
            let st = &a.state;
            out.extend_from_slice(&st.step_count.to_le_bytes());
            for c in [st.config.beta1, st.config.beta2, st.config.epsilon] {
                out.extend_from_slice(&c.to_le_bytes());
            }
            out.extend_from_slice(&(st.m.len() as u64).to_le_bytes());
            st.m.iter().chain(&st.v).for_each(|v| v.write_le(&mut out));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MODEL_MAGIC && magic != CLASSIFIER_MAGIC {
            return Err(r.fail(format!("unknown magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.fail(format!("unsupported format version {version}")));
        }
        let bits = r.u32()?;
        if bits != S::PRECISION.bits() {
            return Err(r.fail(format!("stored at {bits}-bit precision, loading at {}", S::PRECISION.bits())));
        }
        let meta_len = r.len_u64()?;
        let meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| r.fail(format!("metadata: {e}")))?;
        let width = (bits / 8) as usize;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.name()?;
            let kind = match r.take(1)?[0] {
                0 => ParamKind::Weight,
                1 => ParamKind::Buffer,
                k => return Err(r.fail(format!("tensor {name}: unknown kind {k}"))),
            };
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len_u64()?);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| r.fail(format!("tensor {name}: shape overflows")))?;
            let data = r.values::<S>(numel, width)?;
            let tensor = Tensor::new(shape, data).map_err(|e| r.fail(format!("tensor {name}: {e}")))?;
            tensors.push(NamedTensor { name, kind, tensor });
        }
        let count = r.u32()? as usize;
        let mut adam = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.name()?;
            let step_count = r.u64()?;
            let config = AdamConfig {
                beta1: r.f64()?,
                beta2: r.f64()?,
                epsilon: r.f64()?,
            };
            let len = r.len_u64()?;
            let m = r.values::<S>(len, width)?;
            let v = r.values::<S>(len, width)?;
            adam.push(NamedAdam {
                name,
                state: AdamState {
                    step_count,
                    m,
                    v,
                    config,
                },
            });
        }
        if r.pos != bytes.len() {
            return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            magic,
            meta,
            tensors,
            adam,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension(format!(
            "{}.tmp",
            path.extension().and_then(|e| e.to_str()).unwrap_or("ckpt")
        ));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()
        };
        write().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Reads the magic and precision tag without decoding the rest.
pub fn peek_header(path: &Path) -> Result<([u8; 4], Precision)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 12 {
        return Err(fail("truncated header"));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    let bits = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let precision = Precision::from_bits(bits).ok_or_else(|| fail("unknown precision tag"))?;
    Ok((magic, precision))
}

fn write_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: format!("{msg} (at byte {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.fail(format!("truncated: wanted {n} more bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.fail(format!("length {v} too large")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail("name is not UTF-8".into()))
    }

    fn values<S: Scalar>(&mut self, n: usize, width: usize) -> Result<Vec<S>> {
        let total = n.checked_mul(width).ok_or_else(|| self.fail("value count overflows".into()))?;
        Ok(self.take(total)?.chunks_exact(width).map(S::read_le).collect())
    }
}
