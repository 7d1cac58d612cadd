//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "WXRCKPT\0" | version u32 | config: u64 length + UTF-8 TOML
//! step u64 | tensor count u32
//! per tensor: name (u32 length + UTF-8) | rank u32 | dims u64 * rank | f32 data
//! optimizer flag u8; if 1: first and second moments, each as rank + dims + data,
//!   in tensor order
//! SHA-256 of everything above (32 bytes)
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"WXRCKPT\0";
pub const VERSION: u32 = 1;

/// Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Full run configuration as TOML.
    pub config: String,
    /// Number of optimizer steps already taken.
    pub step: u64,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &x in t.data() {
            self.bytes(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(what: impl Into<String>) -> Error {
    Error::Checkpoint(what.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8 in checkpoint"))
    }
    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(corrupt(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(self.u64()?).map_err(|_| corrupt("dimension overflow"))?);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("dimension overflow"))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| corrupt("dimension overflow"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(&shape, data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.config.len() as u64);
        w.bytes(self.config.as_bytes());
        w.u64(self.step);
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            w.tensor(t);
        }
        match &self.optimizer {
            Some(o) => {
                w.u8(1);
                o.m.iter().chain(&o.v).for_each(|t| w.tensor(t));
            }
            None => w.u8(0),
        }
        let digest = Sha256::digest(&w.0);
        w.bytes(&digest);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 32 || &buf[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let n = usize::try_from(r.u64()?).map_err(|_| corrupt("config too large"))?;
        let config = r.string(n)?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.string(n)?;
            params.push((name, r.tensor()?));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let m = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                let v = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
                for ((_, p), (m, v)) in params.iter().zip(m.iter().zip(&v)) {
                    if p.shape() != m.shape() || p.shape() != v.shape() {
                        return Err(corrupt("optimizer state does not match the parameters"));
                    }
                }
                Some(OptimizerState { m, v })
            }
            f => return Err(corrupt(format!("bad optimizer flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after checkpoint body"));
        }
        Ok(Self { config, step, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write then rename so a crash never leaves a half-written file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Copies the stored tensors into `store`, matching by name and shape.
    pub fn restore_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(corrupt(format!("checkpoint has {} tensors, model has {}", self.params.len(), store.len())));
        }
        for (name, t) in &self.params {
            let id = store.id(name).ok_or_else(|| corrupt(format!("unknown parameter {name}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(corrupt(format!("{name}: shape {:?} vs model {:?}", t.shape(), store.get(id).shape())));
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn params_of(store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
        store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }
}
